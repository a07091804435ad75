//! Batch experiments behind the `mixedlane` command.

use std::fmt::Write as _;
use std::path::Path;

use mixedlane_core::controller::{ControlMode, Outcome};
use mixedlane_core::policy::HdvPolicy;
use mixedlane_core::qp::QpStatus;
use mixedlane_core::scenario::ScenarioConfig;
use mixedlane_core::sim::{compute_metrics, run_scenario, BarrierValues, MergeSide, Metrics, TrajectoryLog};
use mixedlane_core::Result;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// SHA-256 over the canonical JSON of the scenario and policy.
pub fn config_hash(config: &ScenarioConfig, policy: &HdvPolicy) -> String {
    let json = serde_json::to_vec(&(config, policy)).expect("config serializes");
    let digest = Sha256::digest(&json);
    digest.iter().fold(String::with_capacity(64), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

/// `count` seeds starting at the scenario's own seed.
pub fn seed_list(base: u64, count: usize) -> Vec<u64> {
    (0..count as u64).map(|i| base + i).collect()
}

/// Runs one scenario per seed in parallel, returning results in seed order.
pub fn run_batch<T: Send>(
    config: &ScenarioConfig,
    policy: &HdvPolicy,
    seeds: &[u64],
    summarize: impl Fn(u64, TrajectoryLog) -> T + Sync,
) -> Result<Vec<T>> {
    seeds
        .par_iter()
        .map(|&seed| {
            let mut c = config.clone();
            c.seed = seed;
            run_scenario(c, policy.clone()).map(|log| summarize(seed, log))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Case {
    /// Time-driven, HDV model known.
    #[serde(rename = "case1_time_known")]
    TimeKnown,
    /// Time-driven, HDV learned online.
    #[serde(rename = "case2_time_unknown")]
    TimeUnknown,
    /// Event-driven, HDV learned online.
    #[serde(rename = "case3_event_unknown")]
    EventUnknown,
}

impl Case {
    pub const ALL: [Case; 3] = [Case::TimeKnown, Case::TimeUnknown, Case::EventUnknown];

    pub fn label(self) -> &'static str {
        match self {
            Case::TimeKnown => "case1_time_known",
            Case::TimeUnknown => "case2_time_unknown",
            Case::EventUnknown => "case3_event_unknown",
        }
    }

    pub fn configure(self, base: &ScenarioConfig) -> ScenarioConfig {
        let (mode, known) = match self {
            Case::TimeKnown => (ControlMode::Time, true),
            Case::TimeUnknown => (ControlMode::Time, false),
            Case::EventUnknown => (ControlMode::Event, false),
        };
        let mut c = base.clone().with_mode(mode);
        c.controller.hdv_known = known;
        c
    }
}

/// One run of a three-case comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareRun {
    pub seed: u64,
    pub outcome: Outcome,
    pub t_f: f64,
    pub min_barrier: BarrierValues,
    pub infeasible_fallbacks: u64,
    pub qps_optimal: usize,
    pub qps_other: usize,
    /// Largest KKT residual over the optimal solves.
    pub max_kkt: f64,
    /// `(t, barriers)` every `decimate` micro-steps, plus the final step.
    #[serde(skip)]
    pub series: Vec<(f64, BarrierValues)>,
}

impl CompareRun {
    fn from_log(seed: u64, log: &TrajectoryLog, decimate: usize) -> Self {
        let m = compute_metrics(log);
        let mut optimal = 0;
        let mut other = 0;
        let mut max_kkt = 0.0f64;
        for q in log.events.iter().flat_map(|e| &e.qps) {
            match (q.status, q.kkt_residual) {
                (QpStatus::Optimal, Some(r)) => {
                    optimal += 1;
                    max_kkt = max_kkt.max(r);
                }
                _ => other += 1,
            }
        }
        let last = log.steps.len().saturating_sub(1);
        let series = log
            .steps
            .iter()
            .enumerate()
            .filter(|(i, _)| i % decimate.max(1) == 0 || *i == last)
            .map(|(_, s)| (s.t, s.barriers))
            .collect();
        Self {
            seed,
            outcome: m.outcome,
            t_f: m.t_f,
            min_barrier: m.min_barrier,
            infeasible_fallbacks: log.degraded.infeasible_fallbacks,
            qps_optimal: optimal,
            qps_other: other,
            max_kkt,
            series,
        }
    }

    /// Some pair barrier went negative.
    pub fn unsafe_any(&self) -> bool {
        self.min_barrier.min() < 0.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseSummary {
    pub case: Case,
    pub runs: Vec<CompareRun>,
    /// Runs with `min b_CH < 0`.
    pub ch_violations: usize,
    /// Runs with any pair barrier below zero.
    pub any_violations: usize,
    pub fallback_runs: usize,
    /// Runs with any pair below zero among those that never fell back.
    pub violations_without_fallback: usize,
    pub complete: usize,
    pub min_barrier: BarrierValues,
    pub max_kkt: f64,
}

impl CaseSummary {
    fn new(case: Case, runs: Vec<CompareRun>) -> Self {
        let inf = f64::INFINITY;
        let min_barrier = runs.iter().fold(
            BarrierValues {
                ch: inf,
                one_c: inf,
                one_h: inf,
                cu: inf,
            },
            |m, r| BarrierValues::from_fn(|p| m.get(p).min(r.min_barrier.get(p))),
        );
        Self {
            case,
            ch_violations: runs.iter().filter(|r| r.min_barrier.ch < 0.0).count(),
            any_violations: runs.iter().filter(|r| r.unsafe_any()).count(),
            fallback_runs: runs.iter().filter(|r| r.infeasible_fallbacks > 0).count(),
            violations_without_fallback: runs
                .iter()
                .filter(|r| r.infeasible_fallbacks == 0 && r.unsafe_any())
                .count(),
            complete: runs.iter().filter(|r| r.outcome == Outcome::Complete).count(),
            max_kkt: runs.iter().map(|r| r.max_kkt).fold(0.0, f64::max),
            min_barrier,
            runs,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareReport {
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub cases: Vec<CaseSummary>,
}

impl CompareReport {
    pub fn case(&self, case: Case) -> &CaseSummary {
        self.cases.iter().find(|c| c.case == case).expect("all cases run")
    }

    pub fn summary_table(&self) -> String {
        let mut s = String::from("case,runs,complete,ch_violations,any_violations,fallback_runs,violations_without_fallback,min_CH,min_1C,min_1H,min_CU,max_kkt\n");
        for c in &self.cases {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{},{},{:e}",
                c.case.label(),
                c.runs.len(),
                c.complete,
                c.ch_violations,
                c.any_violations,
                c.fallback_runs,
                c.violations_without_fallback,
                c.min_barrier.ch,
                c.min_barrier.one_c,
                c.min_barrier.one_h,
                c.min_barrier.cu,
                c.max_kkt
            );
        }
        s
    }
}

/// Runs the three cases over the same seeds. Each seed fixes the disturbance
/// and policy streams, so the cases share them.
pub fn compare(base: &ScenarioConfig, policy: &HdvPolicy, seeds: &[u64], decimate: usize) -> Result<CompareReport> {
    let mut cases = Vec::new();
    for case in Case::ALL {
        let config = case.configure(base);
        let runs = run_batch(&config, policy, seeds, |seed, log| {
            CompareRun::from_log(seed, &log, decimate)
        })?;
        cases.push(CaseSummary::new(case, runs));
    }
    Ok(CompareReport {
        config_hash: config_hash(base, policy),
        seeds: seeds.to_vec(),
        cases,
    })
}

/// Writes `summary.json`, `summary.csv` and one barrier CSV per case and seed.
pub fn write_compare(report: &CompareReport, dir: &Path) -> std::io::Result<()> {
    std::fs::create_dir_all(dir)?;
    for c in &report.cases {
        let sub = dir.join(c.case.label());
        std::fs::create_dir_all(&sub)?;
        for r in &c.runs {
            let mut csv = String::from("t,CH,1C,1H,CU\n");
            for (t, b) in &r.series {
                let _ = writeln!(csv, "{t},{},{},{},{}", b.ch, b.one_c, b.one_h, b.cu);
            }
            std::fs::write(sub.join(format!("seed-{}.csv", r.seed)), csv)?;
        }
    }
    std::fs::write(dir.join("summary.json"), serde_json::to_string_pretty(report)?)?;
    std::fs::write(dir.join("summary.csv"), report.summary_table())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchRow {
    pub seed: u64,
    pub outcome: Outcome,
    pub merge_side: Option<MergeSide>,
    /// Minimum `b_CH` over the run.
    pub safety: f64,
    pub t_f: f64,
    pub energy: f64,
    pub min_barrier: BarrierValues,
    pub trigger_count: usize,
    pub infeasible_fallbacks: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Sample standard deviation; zero for fewer than two values.
    pub std: f64,
}

impl MeanStd {
    pub fn of(xs: &[f64]) -> Option<Self> {
        if xs.is_empty() {
            return None;
        }
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let std = if xs.len() > 1 {
            (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Some(Self { mean, std })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchAggregates {
    pub a_hdv: usize,
    pub b_hdv: usize,
    pub aborted: usize,
    /// Minimum of the per-run Safety values.
    pub safety_min: f64,
    /// Over completed runs only.
    pub t_f: Option<MeanStd>,
    pub energy: Option<MeanStd>,
}

impl BatchAggregates {
    pub fn from_rows(rows: &[BatchRow]) -> Self {
        let complete: Vec<&BatchRow> = rows.iter().filter(|r| r.outcome == Outcome::Complete).collect();
        Self {
            a_hdv: rows.iter().filter(|r| r.merge_side == Some(MergeSide::Ahead)).count(),
            b_hdv: rows.iter().filter(|r| r.merge_side == Some(MergeSide::Behind)).count(),
            aborted: rows.len() - complete.len(),
            safety_min: rows.iter().map(|r| r.safety).fold(f64::INFINITY, f64::min),
            t_f: MeanStd::of(&complete.iter().map(|r| r.t_f).collect::<Vec<_>>()),
            energy: MeanStd::of(&complete.iter().map(|r| r.energy).collect::<Vec<_>>()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchReport {
    pub archetype: String,
    pub mode: ControlMode,
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub runs: Vec<BatchRow>,
    pub aggregates: BatchAggregates,
}

fn batch_row(seed: u64, m: &Metrics, log: &TrajectoryLog) -> BatchRow {
    BatchRow {
        seed,
        outcome: m.outcome,
        merge_side: m.merge_side,
        safety: m.safety(),
        t_f: m.t_f,
        energy: m.energy,
        min_barrier: m.min_barrier,
        trigger_count: m.trigger_count,
        infeasible_fallbacks: log.degraded.infeasible_fallbacks,
    }
}

/// Runs `seeds` with a scripted driver archetype.
pub fn human_batch(config: &ScenarioConfig, archetype: &str, seeds: &[u64]) -> Result<BatchReport> {
    let policy = HdvPolicy::archetype(archetype).ok_or_else(|| {
        mixedlane_core::Error::Config(format!(
            "unknown archetype {archetype:?}; expected aggressive, conservative or hesitant"
        ))
    })?;
    let runs = run_batch(config, &policy, seeds, |seed, log| {
        batch_row(seed, &compute_metrics(&log), &log)
    })?;
    Ok(BatchReport {
        archetype: archetype.to_string(),
        mode: config.controller.mode,
        config_hash: config_hash(config, &policy),
        seeds: seeds.to_vec(),
        aggregates: BatchAggregates::from_rows(&runs),
        runs,
    })
}
