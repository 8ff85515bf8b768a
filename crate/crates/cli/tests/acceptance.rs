//! End-to-end acceptance checks. Each criterion prints one PASS/FAIL line;
//! the test fails if any criterion fails.
//!
//! Run with `cargo test -p director-cli --test acceptance -- --nocapture`.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use director_cli::{cmd_eval, cmd_generate, cmd_run, cmd_train, AppConfig};
use director_core::actions::{ActionSymbol, Origin, FEATURE_DIM};
use director_core::backends::sim::SimFactory;
use director_core::backends::{BackendFactory, ExtractedPlan};
use director_core::director::{gate_one_shot, run_task, RunConfig, Strategies};
use director_core::grpo::{
    compute_advantages, grpo_objective, AdvantageNorm, PolicyParams, Token, TokenGroup, ADVANTAGE_EPS,
};
use director_core::ledger::{GoalLedger, Verdict};
use director_core::metrics::{aggregate, filter_verdicts, score_task, TaskLabel};
use director_core::sim::SimConfig;
use director_core::suite::{generate_suite, SuiteSpec};
use director_core::task::{Goal, GoalTag, GoalType, Modality};
use director_core::trajectory::{GateDecision, Trajectory};

type Check = Result<String, String>;
type Criterion<'a> = (&'static str, Box<dyn Fn() -> Check + 'a>);

fn ensure(ok: bool, detail: String) -> Check {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn jobs() -> usize {
    std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
}

/// Pooled finish over a generated 200-task suite, full director versus a
/// single-shot, single-candidate baseline, averaged over five seeds.
fn closed_loop_gain(tmp: &Path) -> Check {
    let suite = tmp.join("gain-suite");
    cmd_generate(&SuiteSpec::default(), &suite).map_err(|e| e.to_string())?;
    let (mut full, mut base) = (0.0, 0.0);
    let seeds = 5;
    for seed in 0..seeds {
        for (label, strategies) in [("full", Strategies::all()), ("base", Strategies::none())] {
            let mut cfg = AppConfig::parse("").map_err(|e| e.to_string())?;
            cfg.set_seed(seed);
            cfg.run.strategies = strategies;
            let out = tmp.join(format!("gain-{label}-{seed}"));
            cmd_run(&cfg, &suite, &out, jobs(), None).map_err(|e| e.to_string())?;
            let (report, _) = cmd_eval(&out, cfg.run.confidence_threshold).map_err(|e| e.to_string())?;
            if label == "full" {
                full += report.report.finish;
            } else {
                base += report.report.finish;
            }
        }
    }
    let (full, base) = (full / seeds as f64, base / seeds as f64);
    let gain = 100.0 * (full - base);
    ensure(
        gain >= 5.0,
        format!("finish {:.1} vs baseline {:.1}, gain {gain:.1} points (need >= 5)", 100.0 * full, 100.0 * base),
    )
}

/// Trains on 20 generated tasks and compares greedy held-out behaviour.
fn training_efficiency(tmp: &Path) -> Check {
    let cfg = AppConfig::load(&Path::new(env!("CARGO_MANIFEST_DIR")).join("../../config/default.toml"))
        .map_err(|e| e.to_string())?;
    let summary = cmd_train(&cfg, None, &tmp.join("train"), false).map_err(|e| e.to_string())?;
    let (b, a) = (summary.before, summary.after);
    let reduction = 1.0 - a.mean_iterations / b.mean_iterations;
    ensure(
        reduction >= 0.15 && a.mean_reward >= b.mean_reward,
        format!(
            "iterations {:.2} -> {:.2} ({:.0}% fewer, need >= 15%), reward {:.3} -> {:.3}",
            b.mean_iterations,
            a.mean_iterations,
            100.0 * reduction,
            b.mean_reward,
            a.mean_reward
        ),
    )
}

fn random_features(rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut f: Vec<f64> = (0..FEATURE_DIM).map(|_| rng.random_range(0.0..1.0)).collect();
    f[0] = 1.0;
    f
}

fn random_token(rng: &mut ChaCha8Rng, planner: bool) -> Token {
    let pool: Vec<ActionSymbol> = ActionSymbol::vocabulary()
        .into_iter()
        .filter(|a| (a.origin() == Origin::Planner) == planner)
        .collect();
    let n = rng.random_range(2..=pool.len().min(6));
    let legal: Vec<ActionSymbol> = pool.choose_multiple(rng, n).copied().collect();
    Token {
        symbol: *legal.choose(rng).unwrap(),
        origin: if planner { Origin::Planner } else { Origin::Tool },
        features: random_features(rng),
        legal,
    }
}

struct Instance {
    params: PolicyParams,
    old: PolicyParams,
    reference: PolicyParams,
    groups: Vec<TokenGroup>,
    beta: f64,
}

fn random_params(rng: &mut ChaCha8Rng, tau: f64) -> PolicyParams {
    let mut p = PolicyParams::zeros(tau);
    p.weights.iter_mut().for_each(|w| *w = rng.random_range(-1.0..1.0));
    p
}

fn random_instance(rng: &mut ChaCha8Rng) -> Instance {
    let g = *[2usize, 4, 8].choose(rng).unwrap();
    let tau = rng.random_range(0.5..2.0);
    let groups = (0..rng.random_range(1..=2))
        .map(|_| TokenGroup {
            sequences: (0..g)
                .map(|_| {
                    let len = rng.random_range(1..=12);
                    let first_planner = rng.random_range(0..len);
                    (0..len)
                        .map(|i| {
                            let planner = i == first_planner || rng.random_bool(0.5);
                            random_token(rng, planner)
                        })
                        .collect()
                })
                .collect(),
            advantages: (0..g).map(|_| rng.random_range(-2.0..2.0)).collect(),
        })
        .collect();
    let params = random_params(rng, tau);
    let mut old = params.clone();
    old.weights.iter_mut().for_each(|w| *w += rng.random_range(-0.4..0.4));
    Instance {
        params,
        old,
        reference: random_params(rng, tau),
        groups,
        beta: rng.random_range(0.0..0.2),
    }
}

fn objective(inst: &Instance, params: &PolicyParams) -> director_core::grpo::Objective {
    grpo_objective(params, &inst.old, &inst.reference, &inst.groups, 0.2, inst.beta).unwrap()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn gradient_check() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let (mut checked, mut worst) = (0, 0.0f64);
    while checked < 100 {
        let inst = random_instance(&mut rng);
        // Skip instances sitting on a clip boundary, where no derivative exists.
        let near_kink = inst.groups.iter().flat_map(|g| &g.sequences).flatten().any(|t| {
            let rho = (inst.params.log_prob(t) - inst.old.log_prob(t)).exp();
            !t.masked() && ((rho - 0.8).abs() < 1e-3 || (rho - 1.2).abs() < 1e-3)
        });
        if near_kink {
            continue;
        }
        let analytic = objective(&inst, &inst.params).gradient;
        let h = 1e-6;
        let numeric: Vec<f64> = (0..analytic.len())
            .map(|i| {
                let (mut up, mut down) = (inst.params.clone(), inst.params.clone());
                up.weights[i] += h;
                down.weights[i] -= h;
                (objective(&inst, &up).value - objective(&inst, &down).value) / (2.0 * h)
            })
            .collect();
        let diff: Vec<f64> = analytic.iter().zip(&numeric).map(|(a, b)| a - b).collect();
        worst = worst.max(norm(&diff) / norm(&analytic).max(norm(&numeric)).max(1e-8));
        checked += 1;
    }
    ensure(worst < 1e-4, format!("100 instances, worst relative error {worst:.2e} (need < 1e-4)"))
}

fn advantage_oracle() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(102);
    let (mut worst, mut zero_groups) = (0.0f64, 0);
    for i in 0..1000 {
        let g = rng.random_range(2..=16);
        let rewards: Vec<f64> = if i % 4 == 0 {
            zero_groups += 1;
            vec![rng.random_range(0.0..5.0); g]
        } else {
            (0..g).map(|_| rng.random_range(0.0..5.0)).collect()
        };
        let got = compute_advantages(&rewards, AdvantageNorm::Std).map_err(|e| e.to_string())?;
        let n = g as f64;
        let mean = rewards.iter().sum::<f64>() / n;
        let std = (rewards.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n).sqrt();
        for (k, a) in got.iter().enumerate() {
            let want = if i % 4 == 0 { 0.0 } else { (rewards[k] - mean) / (std + ADVANTAGE_EPS) };
            if i % 4 == 0 && *a != 0.0 {
                return Err(format!("group {i}: zero-variance group produced {a}"));
            }
            worst = worst.max((a - want).abs());
        }
    }
    ensure(
        worst <= 1e-12,
        format!("1000 groups ({zero_groups} zero-variance), worst deviation {worst:.1e}"),
    )
}

fn mask_nullity() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(103);
    let tool_rows: Vec<usize> = ActionSymbol::vocabulary()
        .into_iter()
        .filter(|a| a.origin() == Origin::Tool)
        .map(|a| a.index())
        .collect();
    for i in 0..200 {
        let inst = random_instance(&mut rng);
        let base = objective(&inst, &inst.params);
        let mut moved = inst.params.clone();
        for &row in &tool_rows {
            for d in 0..FEATURE_DIM {
                moved.weights[row * FEATURE_DIM + d] += rng.random_range(-50.0..50.0);
            }
        }
        let after = objective(&inst, &moved);
        if after.value.to_bits() != base.value.to_bits() || after.gradient != base.gradient {
            return Err(format!("instance {i}: objective moved by {:e}", after.value - base.value));
        }
    }
    Ok("200 instances, tool-token logit perturbations change the objective by exactly 0".into())
}

fn metric_oracle() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(104);
    for set in 0..50 {
        let mut scores = Vec::new();
        let (mut pooled_s, mut pooled_t, mut successes) = (0usize, 0usize, 0usize);
        let tasks = rng.random_range(1..=10);
        for k in 0..tasks {
            let n = rng.random_range(1..=25);
            let goals: Vec<(String, GoalType)> = (0..n)
                .map(|i| (format!("g{i}"), GoalType::ALL[rng.random_range(0..6)]))
                .collect();
            let verdicts: Vec<Verdict> = goals
                .iter()
                .map(|(id, _)| {
                    let c = *[0.80, 0.81, rng.random_range(0.0..=1.0)].choose(&mut rng).unwrap();
                    Verdict::new(id.clone(), rng.random_bool(0.7), c)
                })
                .collect();
            let ledger = GoalLedger::from_goals(goals.clone()).apply(&verdicts).map_err(|e| e.to_string())?;
            let score = score_task(&ledger, &Trajectory::new(format!("t{k}")), 0.81);
            let s = verdicts.iter().filter(|v| v.satisfied && v.confidence >= 0.81).count();
            let label = match s {
                0 => TaskLabel::Failure,
                _ if 5 * s >= 4 * n => TaskLabel::Success,
                _ => TaskLabel::Partial,
            };
            if score.effective_satisfied != s || score.label != label {
                return Err(format!("set {set} task {k}: got {} {:?}, want {s} {label:?}", score.effective_satisfied, score.label));
            }
            pooled_s += s;
            pooled_t += n;
            successes += (label == TaskLabel::Success) as usize;
            scores.push(score);
        }
        let report = aggregate(&scores).map_err(|e| e.to_string())?;
        if report.finish != pooled_s as f64 / pooled_t as f64
            || report.success_rate_ge80 != successes as f64 / tasks as f64
        {
            return Err(format!("set {set}: aggregate disagrees with recount"));
        }
    }
    let boundary = filter_verdicts(&[Verdict::new("a", true, 0.80), Verdict::new("b", true, 0.81)], 0.81);
    ensure(
        !boundary[0].satisfied && boundary[1].satisfied,
        "50 verdict sets match the recount; 0.80 filtered, 0.81 passes".into(),
    )
}

fn rollback_invariant() -> Check {
    let mixed = generate_suite(&SuiteSpec {
        tasks: 40,
        min_goals: 3,
        i2i_fraction: 0.5,
        seed: 3,
        ..SuiteSpec::default()
    });
    let i2i = generate_suite(&SuiteSpec {
        tasks: 20,
        i2i_fraction: 1.0,
        seed: 4,
        ..SuiteSpec::default()
    });
    let mut rng = ChaCha8Rng::seed_from_u64(105);
    let (mut adversarial, mut rollbacks_seen) = (0, 0);
    for run in 0..1000 {
        let seed: u64 = rng.random();
        let hostile = run % 5 == 0;
        let (task, sim) = if hostile {
            let sim = SimConfig {
                p_success: 0.0,
                p_side_effect: 1.0,
                verifier_noise: 0.0,
                i2i_presatisfied: 0.5,
                seed,
            };
            (i2i.choose(&mut rng).unwrap(), sim)
        } else {
            let sim = SimConfig {
                p_success: rng.random_range(0.0..=1.0),
                p_side_effect: rng.random_range(0.0..=1.0),
                verifier_noise: rng.random_range(0.0..=0.3),
                i2i_presatisfied: rng.random_range(0.0..=1.0),
                seed,
            };
            (mixed.choose(&mut rng).unwrap(), sim)
        };
        let cfg = RunConfig {
            seed,
            strategies: if hostile {
                Strategies::all()
            } else {
                Strategies {
                    reprompting: rng.random(),
                    best_of_n: rng.random(),
                    refinement: rng.random(),
                }
            },
            ..RunConfig::default()
        };
        let backends = SimFactory::new(sim).for_task(task).map_err(|e| e.to_string())?;
        let traj = run_task(task, &cfg, &backends).map_err(|e| e.to_string())?;
        let terminal = traj.terminal.as_ref().unwrap();
        let mut best = terminal.initial_verdicts.iter().filter(|v| v.satisfied && v.confidence >= 0.81).count();
        for step in &traj.steps {
            if step.best_coverage < best {
                return Err(format!("run {run}: best coverage fell from {best} to {}", step.best_coverage));
            }
            best = step.best_coverage;
        }
        if hostile {
            adversarial += 1;
            if traj.rollbacks() == 0 {
                return Err(format!("run {run}: p_side_effect 1 / p_success 0 run without a rollback"));
            }
        }
        rollbacks_seen += traj.rollbacks();
    }
    Ok(format!(
        "1000 runs monotone; all {adversarial} side-effect-only runs rolled back ({rollbacks_seen} rollbacks total)"
    ))
}

fn determinism(tmp: &Path) -> Check {
    let suite = tmp.join("det-suite");
    cmd_generate(
        &SuiteSpec {
            tasks: 30,
            i2i_fraction: 0.3,
            seed: 8,
            ..SuiteSpec::default()
        },
        &suite,
    )
    .map_err(|e| e.to_string())?;
    let cfg = AppConfig::parse("seed = 17\n").map_err(|e| e.to_string())?;
    let read = |dir: &Path| -> Vec<(String, Vec<u8>)> {
        let mut files: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
            .unwrap()
            .map(|e| e.unwrap().path())
            .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
            .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
            .collect();
        files.sort();
        files
    };
    cmd_run(&cfg, &suite, &tmp.join("det-a"), 1, None).map_err(|e| e.to_string())?;
    cmd_run(&cfg, &suite, &tmp.join("det-b"), jobs().max(2), None).map_err(|e| e.to_string())?;
    let (a, b) = (read(&tmp.join("det-a")), read(&tmp.join("det-b")));
    ensure(
        a.len() == 30 && a == b,
        format!("{} trajectory files, byte-identical: {}", a.len(), a == b),
    )
}

fn gate_boundary() -> Check {
    let cfg = RunConfig::default();
    let plan = |feasibility: f64, n: usize, conflict: bool| ExtractedPlan {
        goals: (0..n)
            .map(|i| Goal {
                id: format!("g{i}"),
                text: format!("goal {i}"),
                goal_type: GoalType::AddObject,
                tag: GoalTag::Local,
                strength: 50.0,
                conflict: conflict && i == 0,
            })
            .collect(),
        one_shot_feasibility: feasibility,
    };
    if gate_one_shot(&plan(0.9, 15, false), &cfg) != GateDecision::OneShot
        || gate_one_shot(&plan(0.9, 16, false), &cfg) != GateDecision::Staged
    {
        return Err("(0.9, 15) / (0.9, 16) boundary wrong".into());
    }
    let mut cells = 0;
    for f in [0.0, 0.69, 0.7, 0.71, 0.9, 1.0] {
        for n in [1, 14, 15, 16, 30] {
            for c in [false, true] {
                let want = if f >= 0.7 && n <= 15 && !c { GateDecision::OneShot } else { GateDecision::Staged };
                if gate_one_shot(&plan(f, n, c), &cfg) != want {
                    return Err(format!("feasibility {f}, {n} goals, conflict {c}: expected {want:?}"));
                }
                cells += 1;
            }
        }
    }
    Ok(format!("(0.9, 15) one-shot, (0.9, 16) staged, {cells}-cell grid agrees"))
}

fn budget_cap() -> Check {
    let suite = generate_suite(&SuiteSpec {
        tasks: 40,
        i2i_fraction: 0.5,
        seed: 6,
        ..SuiteSpec::default()
    });
    let cfg = RunConfig::default();
    let sim = SimConfig {
        p_success: 0.0,
        ..SimConfig::default()
    };
    let factory = SimFactory::new(sim);
    let mut by_modality: BTreeMap<&str, usize> = BTreeMap::new();
    for task in &suite {
        let traj = run_task(task, &cfg, &factory.for_task(task).map_err(|e| e.to_string())?)
            .map_err(|e| e.to_string())?;
        let cap = 6 * cfg.microgrid(task.modality);
        if traj.iterations() != 6 || traj.editor_calls() > cap {
            return Err(format!(
                "{}: {} iterations, {} editor calls (cap {cap})",
                task.id,
                traj.iterations(),
                traj.editor_calls()
            ));
        }
        *by_modality.entry(if task.modality == Modality::T2I { "t2i" } else { "i2i" }).or_default() += 1;
    }
    Ok(format!("{} tasks ({by_modality:?}) all ran exactly 6 iterations within the editor cap", suite.len()))
}

#[test]
fn acceptance() {
    let tmp = tempfile::tempdir().unwrap();
    let criteria: Vec<Criterion> = vec![
        ("closed-loop gain", Box::new(|| closed_loop_gain(tmp.path()))),
        ("training efficiency", Box::new(|| training_efficiency(tmp.path()))),
        ("gradient check", Box::new(gradient_check)),
        ("advantage oracle", Box::new(advantage_oracle)),
        ("mask nullity", Box::new(mask_nullity)),
        ("metric oracle", Box::new(metric_oracle)),
        ("rollback invariant", Box::new(rollback_invariant)),
        ("determinism", Box::new(|| determinism(tmp.path()))),
        ("gate boundary", Box::new(gate_boundary)),
        ("budget cap", Box::new(budget_cap)),
    ];
    let mut failures = Vec::new();
    for (i, (name, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let result = check();
        let secs = start.elapsed().as_secs_f64();
        match &result {
            Ok(detail) => println!("[{:>2}] PASS {name}: {detail} ({secs:.1}s)", i + 1),
            Err(detail) => {
                println!("[{:>2}] FAIL {name}: {detail} ({secs:.1}s)", i + 1);
                failures.push(*name);
            }
        }
    }
    assert!(failures.is_empty(), "failed criteria: {failures:?}");
}
