//! Independent reference routines shared by the integration and acceptance tests.
#![allow(dead_code)]

use mixedlane_core::barrier::{
    cbf_row_pair, limit_cbf_rows, nominal_rows, BarrierParams, Cav, ClfParams, ConstraintRow, OtherMotion, PairId,
    RoadLimits, RowTag, Scene,
};
use mixedlane_core::controller::{event_controls, nominal_controls, ControlMode, EventKind, Outcome};
use mixedlane_core::interval::Interval;
use mixedlane_core::policy::HdvPolicy;
use mixedlane_core::qp::QpProblem;
use mixedlane_core::robust::{
    build_uncertainty_box, robust_lf_min, robustify_rows, BoundVectors, ControlSigns, RobustOptions, StateBox,
    UncertaintyBox,
};
use mixedlane_core::scenario::ScenarioConfig;
use mixedlane_core::sim::{run_scenario, StepRecord, TrajectoryLog};
use mixedlane_core::vehicle::{AdaptiveTerms, ErrorVector, VehicleState};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_scene(rng: &mut ChaCha8Rng) -> Scene<f64> {
    let mut veh = |x0: f64, y0: f64| {
        VehicleState::new(
            x0 + rng.gen_range(-15.0..15.0),
            y0 + rng.gen_range(-1.5..1.5),
            rng.gen_range(-0.3..0.3),
            rng.gen_range(16.0..34.0),
        )
    };
    let cav_c = veh(20.0, 0.0);
    let cav_1 = veh(50.0, 4.0);
    let hdv = veh(10.0, 4.0);
    let slow = veh(60.0, 0.0);
    let terms = AdaptiveTerms::new(
        rng.gen_range(-1.0..1.0),
        rng.gen_range(-0.5..0.5),
        rng.gen_range(-0.1..0.1),
        rng.gen_range(-1.0..1.0),
    );
    Scene {
        cav_c,
        cav_1,
        hdv,
        hdv_motion: OtherMotion::Adaptive {
            terms,
            error: ErrorVector::zero(),
            error_rate: ErrorVector::zero(),
        },
        slow,
    }
}

pub fn random_bounds(rng: &mut ChaCha8Rng) -> BoundVectors<f64> {
    let d = BoundVectors::<f64>::default();
    let mut jitter = |v: [f64; 4]| v.map(|x| x * rng.gen_range(0.0..2.0));
    BoundVectors {
        w: jitter(d.w),
        nu: jitter(d.nu),
        s_c: jitter(d.s_c),
        s_1: jitter(d.s_1),
        s_h: jitter(d.s_h),
        s_u: jitter(d.s_u),
    }
}

pub fn sample(rng: &mut ChaCha8Rng, iv: &Interval<f64>) -> f64 {
    if iv.is_point() {
        iv.lo
    } else {
        rng.gen_range(iv.lo..=iv.hi)
    }
}

pub fn sample_state(rng: &mut ChaCha8Rng, b: &StateBox<f64>) -> VehicleState<f64> {
    VehicleState::new(
        sample(rng, &b.x),
        sample(rng, &b.y),
        sample(rng, &b.theta),
        sample(rng, &b.v),
    )
}

/// The nominal pair row at one sampled point of the box.
pub fn sampled_pair_row(
    rng: &mut ChaCha8Rng,
    pair: PairId,
    bx: &UncertaintyBox<f64>,
    params: &BarrierParams<f64>,
) -> ConstraintRow<f64> {
    let c = sample_state(rng, &bx.cav_c);
    let one = sample_state(rng, &bx.cav_1);
    let h = sample_state(rng, &bx.hdv);
    let u = sample_state(rng, &bx.slow);
    let e: [f64; 4] = std::array::from_fn(|j| sample(rng, &bx.error[j]));
    let ed: [f64; 4] = std::array::from_fn(|j| sample(rng, &bx.error_rate[j]));
    let adaptive = OtherMotion::Adaptive {
        terms: bx.hdv_terms,
        error: ErrorVector::from_array(e),
        error_rate: ErrorVector::from_array(ed),
    };
    match pair {
        PairId::CH => cbf_row_pair(pair, &c, &h, &adaptive, params),
        PairId::OneH => cbf_row_pair(pair, &one, &h, &adaptive, params),
        PairId::OneC => cbf_row_pair(pair, &one, &c, &OtherMotion::Controlled(Cav::C), params),
        PairId::CU => cbf_row_pair(pair, &c, &u, &OtherMotion::Drift, params),
    }
}

/// Largest amount by which a robust drift bound exceeds the Monte-Carlo minimum
/// over `samples` points of the box, across every CBF row (pairs and limits).
/// A non-positive result means the robust bound is never above a sampled value.
pub fn robust_min_excess(rng: &mut ChaCha8Rng, samples: usize) -> (f64, RowTag) {
    let params = BarrierParams::default();
    let limits = RoadLimits::default();
    let opts = RobustOptions::default();
    let scene = random_scene(rng);
    let bounds = random_bounds(rng);
    let bx = build_uncertainty_box(&scene, &bounds, 0.0).unwrap();
    let mut worst = (f64::NEG_INFINITY, RowTag::Pair(PairId::CH));
    for pair in PairId::ALL {
        let robust = robust_lf_min(pair, &bx, &params, &opts);
        let mc = (0..samples)
            .map(|_| sampled_pair_row(rng, pair, &bx, &params).c_f)
            .fold(f64::INFINITY, f64::min);
        if robust - mc > worst.0 {
            worst = (robust - mc, RowTag::Pair(pair));
        }
    }
    let nominal = nominal_rows(&scene, &limits, &params, &ClfParams::default());
    let robust_rows = robustify_rows(&nominal, &bx, &limits, &params, &ControlSigns::NON_NEGATIVE, &opts);
    for cav in Cav::ALL {
        let sb = *bx.vehicle(cav);
        let mut mc = [f64::INFINITY; 4];
        for _ in 0..samples {
            let s = sample_state(rng, &sb);
            for (k, row) in limit_cbf_rows(cav, &s, &limits, &params).iter().enumerate() {
                mc[k] = mc[k].min(row.c_f);
            }
        }
        let tags = [
            RowTag::SpeedMin(cav),
            RowTag::SpeedMax(cav),
            RowTag::LaneLower(cav),
            RowTag::LaneUpper(cav),
        ];
        for (k, tag) in tags.into_iter().enumerate() {
            let robust = robust_rows.iter().find(|r| r.tag == tag).unwrap().c_f;
            if robust - mc[k] > worst.0 {
                worst = (robust - mc[k], tag);
            }
        }
    }
    worst
}

/// Largest control difference between the event-mode solve with a zero box and
/// the time-mode solve, at a random scene.
pub fn point_box_control_gap(rng: &mut ChaCha8Rng) -> Option<f64> {
    let mut cfg = ScenarioConfig::default();
    cfg.controller.bounds = BoundVectors::zero();
    let mut scene = random_scene(rng);
    scene.hdv_motion = OtherMotion::Adaptive {
        terms: AdaptiveTerms::zero(),
        error: ErrorVector::zero(),
        error_rate: ErrorVector::zero(),
    };
    let time = nominal_controls(&cfg.clone().with_mode(ControlMode::Time).control_params(), &scene);
    let event = event_controls(&cfg.with_mode(ControlMode::Event).control_params(), &scene);
    match (time, event) {
        (Some(a), Some(b)) => Some(
            (0..2)
                .map(|i| (a[i].u - b[i].u).abs().max((a[i].phi - b[i].phi).abs()))
                .fold(0.0, f64::max),
        ),
        (None, None) => None,
        _ => Some(f64::INFINITY),
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Random strictly convex problem with a known interior feasible point.
pub fn random_qp(rng: &mut ChaCha8Rng) -> QpProblem<f64> {
    let n = rng.gen_range(2..=8);
    let m = rng.gen_range(1..=12);
    let mf: Vec<f64> = (0..n * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut h = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            h[i * n + j] = (0..n).map(|k| mf[k * n + i] * mf[k * n + j]).sum::<f64>();
        }
        h[i * n + i] += 0.1;
    }
    let f: Vec<f64> = (0..n).map(|_| rng.gen_range(-5.0..5.0)).collect();
    let z0: Vec<f64> = (0..n).map(|_| rng.gen_range(-0.5..0.5)).collect();
    let mut a = Vec::new();
    let mut b = Vec::new();
    for _ in 0..m {
        let row: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        b.push(dot(&row, &z0) + rng.gen_range(0.05..1.0));
        a.extend(row);
    }
    QpProblem::new(n, h, f, a, b, vec![-2.0; n], vec![2.0; n]).unwrap()
}

/// First-order reference solver: augmented-Lagrangian multiplier updates for
/// the rows, accelerated projected gradient over the box for each inner solve.
pub fn pg_oracle(p: &QpProblem<f64>) -> Vec<f64> {
    let n = p.n;
    let m = p.rows();
    let mut y = vec![0.0; m];
    let mut z = vec![0.0; n];
    let mut rho = 1.0;
    let hnorm: f64 = p.h.iter().map(|x| x * x).sum::<f64>().sqrt();
    let anorm: f64 = p.a.iter().map(|x| x * x).sum::<f64>();
    for _outer in 0..400 {
        rho = f64::min(rho * 1.5, 1e3);
        let step = 1.0 / (hnorm + rho * anorm);
        let mut zp = z.clone();
        let mut t = 1.0f64;
        for _ in 0..50_000 {
            let mut g: Vec<f64> = (0..n)
                .map(|i| (0..n).map(|j| p.h[i * n + j] * zp[j]).sum::<f64>() + p.f[i])
                .collect();
            for r in 0..m {
                let slack = dot(p.row(r), &zp) - p.b[r] + y[r] / rho;
                if slack > 0.0 {
                    for i in 0..n {
                        g[i] += rho * slack * p.row(r)[i];
                    }
                }
            }
            let znew: Vec<f64> = (0..n).map(|i| (zp[i] - step * g[i]).clamp(p.lb[i], p.ub[i])).collect();
            let moved: f64 = znew.iter().zip(&z).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            // Gradient-based restart of the momentum.
            let uphill: f64 = (0..n).map(|i| g[i] * (znew[i] - z[i])).sum();
            if uphill > 0.0 {
                t = 1.0;
            }
            let tn = (1.0 + (1.0 + 4.0 * t * t).sqrt()) / 2.0;
            zp = (0..n).map(|i| znew[i] + (t - 1.0) / tn * (znew[i] - z[i])).collect();
            z = znew;
            t = tn;
            if moved < 1e-14 {
                break;
            }
        }
        let mut change = 0.0f64;
        for r in 0..m {
            let ny = (y[r] + rho * (dot(p.row(r), &z) - p.b[r])).max(0.0);
            change = change.max((ny - y[r]).abs());
            y[r] = ny;
        }
        if change < 1e-11 && p.max_violation(&z) < 1e-10 {
            break;
        }
    }
    z
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Completion inside the target band (never earlier), abort only at the horizon,
/// and a closing event at the last step.
pub fn termination_contract(log: &TrajectoryLog) -> Result<(), String> {
    let last = log.steps.last().ok_or("empty log")?;
    let horizon = log.header.config.controller.t_final;
    match log.outcome {
        Outcome::Complete => {
            if (last.states.cav_c.y - 4.0).abs() > 0.3 || log.t_f > horizon {
                return Err(format!(
                    "complete at t = {} with y_C = {}",
                    log.t_f, last.states.cav_c.y
                ));
            }
            if let Some(s) = log.steps[..log.steps.len() - 1]
                .iter()
                .find(|s| (s.states.cav_c.y - 4.0).abs() <= 0.3)
            {
                return Err(format!("inside the band already at t = {}", s.t));
            }
        }
        Outcome::Abort => {
            if log.t_f < horizon - 1e-9 {
                return Err(format!("abort before the horizon at t = {}", log.t_f));
            }
        }
    }
    let end = log.events.last().ok_or("no events")?;
    let want = match log.outcome {
        Outcome::Complete => EventKind::Termination,
        Outcome::Abort => EventKind::Abort,
    };
    if end.step != last.step || end.kind != want {
        return Err(format!("closing event {:?} at step {}", end.kind, end.step));
    }
    Ok(())
}

/// At every control instant the estimate equals the true HDV state, and each
/// trigger's component crossed its bound during the last micro-step. Returns
/// the number of triggers checked.
pub fn synchronization_check(log: &TrajectoryLog) -> Result<usize, String> {
    let mut steps = log.steps.iter();
    let mut triggers = 0;
    for e in log.control_instants() {
        let s = steps.find(|s| s.step == e.step).ok_or(format!("no step {}", e.step))?;
        if s.hdv_estimate != Some(s.states.hdv) {
            return Err(format!("post-sync error at step {}", e.step));
        }
        if let Some(d) = e.detail {
            let crossed = d.value.abs() >= d.bound && d.previous.abs() < d.bound;
            if !crossed || d.value.abs() - d.bound > (d.value - d.previous).abs() {
                return Err(format!("trigger at step {}: {d:?}", e.step));
            }
            triggers += 1;
        }
    }
    Ok(triggers)
}

#[derive(Debug, Clone, Copy)]
pub struct WorstRow {
    pub tag: Option<RowTag>,
    pub t: f64,
    pub rel: f64,
}

/// `d/dt b + k b` by central differences against the analytic row value, with
/// disturbances off and an HDV that only drifts. Returns the number of rows
/// compared and the worst relative error.
pub fn lie_derivative_check(runs: u64) -> (usize, WorstRow) {
    let mut checked = 0;
    let mut worst = WorstRow {
        tag: None,
        t: 0.0,
        rel: 0.0,
    };
    for seed in 0..runs {
        let mode = if seed % 2 == 0 {
            ControlMode::Time
        } else {
            ControlMode::Event
        };
        let mut cfg = ScenarioConfig::default().with_mode(mode);
        cfg.seed = seed;
        cfg.disturbance.enabled = false;
        cfg.initial.cav_c.x += seed as f64;
        cfg.initial.hdv.x -= 2.0 * seed as f64;
        let log = run_scenario(cfg.clone(), HdvPolicy::Zero).expect("valid scenario");
        let dt = cfg.micro_step;
        let limits = cfg.limits();
        let params = cfg.barrier;
        let clf = cfg.clf_params();
        let scene = |s: &StepRecord| Scene {
            cav_c: s.states.cav_c,
            cav_1: s.states.cav_1,
            hdv: s.states.hdv,
            hdv_motion: OtherMotion::Drift,
            slow: s.states.slow,
        };
        for n in (1..log.steps.len() - 2).step_by(7) {
            let (prev, cur, next) = (&log.steps[n - 1], &log.steps[n], &log.steps[n + 1]);
            if prev.controls.cav_c != cur.controls.cav_c || prev.controls.cav_1 != cur.controls.cav_1 {
                continue;
            }
            let (sp, sc, sn) = (scene(prev), scene(cur), scene(next));
            let c = cur.controls;
            let z = [c.cav_c.u, c.cav_c.phi, c.cav_1.u, c.cav_1.phi, 0.0, 0.0, 0.0, 0.0];
            for row in nominal_rows(&sc, &limits, &params, &clf).iter().filter(|r| r.is_cbf()) {
                let b = |s: &Scene<f64>| match row.tag {
                    RowTag::Pair(p) => s.barrier(p, &params),
                    RowTag::SpeedMin(c) => s.cav(c).v - limits.v_min,
                    RowTag::SpeedMax(c) => limits.v_max - s.cav(c).v,
                    RowTag::LaneLower(c) => s.cav(c).y + limits.lane_width / 2.0,
                    RowTag::LaneUpper(c) => 1.5 * limits.lane_width - s.cav(c).y,
                    _ => unreachable!(),
                };
                let k = match row.tag {
                    RowTag::Pair(p) => params.k_pair[p.index()],
                    RowTag::SpeedMin(_) | RowTag::SpeedMax(_) => params.k_speed,
                    _ => params.k_lane,
                };
                let fd = (b(&sn) - b(&sp)) / (2.0 * dt) + k * b(&sc);
                let analytic = row.value(&z);
                let scale =
                    row.c_f.abs() + row.c_g.iter().zip(&z).map(|(g, u)| (g * u).abs()).sum::<f64>() + k * b(&sc).abs();
                let rel = (fd - analytic).abs() / scale.max(1e-9);
                if rel > worst.rel {
                    worst = WorstRow {
                        tag: Some(row.tag),
                        t: cur.t,
                        rel,
                    };
                }
                checked += 1;
            }
        }
    }
    (checked, worst)
}
