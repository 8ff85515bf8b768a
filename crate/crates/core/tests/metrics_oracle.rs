use std::collections::BTreeMap;

use director_core::backends::EditMode;
use director_core::ledger::{GoalLedger, Verdict};
use director_core::metrics::{aggregate, filter_verdicts, score_task, TaskLabel, TaskScore};
use director_core::task::GoalType;
use director_core::trajectory::{StepRecord, Trajectory};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const THRESHOLD: f64 = 0.81;

struct RandomTask {
    goals: Vec<(String, GoalType)>,
    rounds: Vec<Vec<Verdict>>,
    steps: Vec<usize>,
}

fn confidence(rng: &mut ChaCha8Rng) -> f64 {
    match rng.random_range(0..5) {
        0 => 0.80,
        1 => 0.81,
        2 => 0.809_999_999,
        _ => rng.random_range(0.0..=1.0),
    }
}

fn random_task(rng: &mut ChaCha8Rng) -> RandomTask {
    let n = rng.random_range(1..=25);
    let goals: Vec<(String, GoalType)> = (0..n)
        .map(|i| (format!("g{}", i + 1), GoalType::ALL[rng.random_range(0..GoalType::ALL.len())]))
        .collect();
    let rounds = (0..rng.random_range(0..=3))
        .map(|_| {
            let mut round = Vec::new();
            for (id, _) in &goals {
                if rng.random_bool(0.7) {
                    round.push(Verdict::new(id.clone(), rng.random_bool(0.6), confidence(rng)));
                }
            }
            round
        })
        .collect();
    let steps = (0..rng.random_range(0..=6)).map(|_| rng.random_range(1..=4)).collect();
    RandomTask { goals, rounds, steps }
}

fn trajectory(id: &str, steps: &[usize]) -> Trajectory {
    let mut t = Trajectory::new(id);
    for (i, &candidates) in steps.iter().enumerate() {
        t.steps.push(StepRecord {
            iteration: i + 1,
            directive: String::new(),
            mode: EditMode::LocalEdit,
            addressed: Vec::new(),
            reprompted: false,
            candidate_seeds: (0..candidates as u64).collect(),
            judge_scores: Vec::new(),
            chosen_index: 0,
            verdicts: Vec::new(),
            coverage: 0,
            rollback: false,
            best_coverage: 0,
            pending_after: Vec::new(),
            completed_after: Vec::new(),
            features: Vec::new(),
            decisions: Vec::new(),
            error: None,
        });
    }
    t
}

/// Independent recount: last verdict per goal wins, then the inclusive threshold.
fn oracle_satisfied(task: &RandomTask) -> BTreeMap<String, bool> {
    let mut latest: BTreeMap<String, (bool, f64)> = BTreeMap::new();
    for round in &task.rounds {
        for v in round {
            latest.insert(v.goal_id.clone(), (v.satisfied, v.confidence));
        }
    }
    task.goals
        .iter()
        .map(|(id, _)| {
            let ok = matches!(latest.get(id), Some((true, c)) if *c >= 0.81);
            (id.clone(), ok)
        })
        .collect()
}

#[test]
fn scores_match_brute_force_recount() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for set in 0..50 {
        let tasks: Vec<RandomTask> = (0..rng.random_range(1..=10)).map(|_| random_task(&mut rng)).collect();
        let mut scores: Vec<TaskScore> = Vec::new();
        let (mut pooled_s, mut pooled_t, mut successes, mut iterations, mut edits) = (0, 0, 0, 0, 0);
        let mut macro_sum = 0.0;
        let mut type_counts: BTreeMap<GoalType, (usize, usize)> = BTreeMap::new();
        for (k, task) in tasks.iter().enumerate() {
            let mut ledger = GoalLedger::from_goals(task.goals.clone());
            for round in &task.rounds {
                ledger = ledger.apply(round).unwrap();
            }
            let traj = trajectory(&format!("t{k}"), &task.steps);
            let score = score_task(&ledger, &traj, THRESHOLD);

            let truth = oracle_satisfied(task);
            let s = truth.values().filter(|x| **x).count();
            let t = task.goals.len();
            assert_eq!(score.effective_satisfied, s, "set {set} task {k}");
            assert_eq!(score.total_goals, t);
            assert_eq!(score.finish_fraction, s as f64 / t as f64);
            let label = if s == 0 {
                TaskLabel::Failure
            } else if 5 * s >= 4 * t {
                TaskLabel::Success
            } else {
                TaskLabel::Partial
            };
            assert_eq!(score.label, label);
            assert_eq!(score.iterations, task.steps.len());
            assert_eq!(score.editor_calls, task.steps.iter().sum::<usize>());
            let mut per_type: BTreeMap<GoalType, (usize, usize)> = BTreeMap::new();
            for (id, ty) in &task.goals {
                let e = per_type.entry(*ty).or_default();
                e.1 += 1;
                e.0 += truth[id] as usize;
                let g = type_counts.entry(*ty).or_default();
                g.1 += 1;
                g.0 += truth[id] as usize;
            }
            let got: BTreeMap<GoalType, (usize, usize)> =
                score.per_type.iter().map(|(k, c)| (*k, (c.satisfied, c.total))).collect();
            assert_eq!(got, per_type);

            pooled_s += s;
            pooled_t += t;
            successes += (label == TaskLabel::Success) as usize;
            iterations += task.steps.len();
            edits += task.steps.iter().sum::<usize>();
            macro_sum += s as f64 / t as f64;
            scores.push(score);
        }
        let n = tasks.len() as f64;
        let report = aggregate(&scores).unwrap();
        assert_eq!(report.tasks, tasks.len());
        assert_eq!(report.finish, pooled_s as f64 / pooled_t as f64);
        assert_eq!(report.success_rate_ge80, successes as f64 / n);
        assert_eq!(report.mean_iterations, iterations as f64 / n);
        assert_eq!(report.mean_editor_calls, edits as f64 / n);
        assert!((report.finish_macro - macro_sum / n).abs() < 1e-12);
        for ty in GoalType::ALL {
            let rate = &report.per_type[&ty];
            match type_counts.get(&ty) {
                Some(&(s, t)) => {
                    assert_eq!((rate.satisfied, rate.total), (s, t));
                    assert_eq!(rate.rate, Some(s as f64 / t as f64));
                }
                None => assert_eq!((rate.total, rate.rate), (0, None)),
            }
        }
    }
}

#[test]
fn threshold_boundary() {
    let verdicts = [Verdict::new("a", true, 0.80), Verdict::new("b", true, 0.81), Verdict::new("c", false, 0.99)];
    let filtered = filter_verdicts(&verdicts, THRESHOLD);
    assert_eq!(filtered.iter().map(|v| v.satisfied).collect::<Vec<_>>(), vec![false, true, false]);

    let ledger = GoalLedger::from_goals([("a".to_string(), GoalType::Text), ("b".to_string(), GoalType::Text)])
        .apply(&verdicts[..2])
        .unwrap();
    let score = score_task(&ledger, &Trajectory::new("t"), THRESHOLD);
    assert_eq!(score.effective_satisfied, 1);
    assert_eq!(score.label, TaskLabel::Partial);
}

#[test]
fn success_label_boundary() {
    // 4 of 5 is exactly 80%.
    let goals: Vec<(String, GoalType)> = (0..5).map(|i| (format!("g{i}"), GoalType::Color)).collect();
    let mut ledger = GoalLedger::from_goals(goals);
    ledger = ledger
        .apply(&(0..4).map(|i| Verdict::new(format!("g{i}"), true, 0.9)).collect::<Vec<_>>())
        .unwrap();
    assert_eq!(score_task(&ledger, &Trajectory::new("t"), THRESHOLD).label, TaskLabel::Success);
}

proptest! {
    #[test]
    fn filtering_only_ever_clears_satisfaction(
        raw in prop::collection::vec((any::<bool>(), 0.0f64..=1.0), 0..30),
        threshold in 0.0f64..=1.0,
    ) {
        let verdicts: Vec<Verdict> = raw.iter().enumerate().map(|(i, (s, c))| Verdict::new(format!("g{i}"), *s, *c)).collect();
        let filtered = filter_verdicts(&verdicts, threshold);
        for (a, b) in verdicts.iter().zip(&filtered) {
            prop_assert_eq!(b.satisfied, a.satisfied && a.confidence >= threshold);
            prop_assert_eq!(&a.goal_id, &b.goal_id);
            prop_assert_eq!(a.confidence, b.confidence);
        }
        prop_assert_eq!(filter_verdicts(&filtered, threshold), filtered);
    }
}
