//! Barrier/Lyapunov functions and their affine-in-control constraint rows.
//!
//! Every constraint is expressed over the joint decision vector
//! `z = [u_C, phi_C, u_1, phi_1, delta_1, delta_2, delta_3, delta_4]`.
//! A CBF row asserts `c_f + c_g·z >= 0`; a CLF row asserts `c_f + c_g·z <= 0`
//! where `c_g` carries `-1` on its own slack.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::qp::QpProblem;
use crate::scalar::Scalar;
use crate::vehicle::{AdaptiveTerms, ErrorVector, VehicleState};

/// Length of the decision vector.
pub const N_DECISION: usize = 8;
/// Index of the first slack variable.
pub const SLACK_OFFSET: usize = 4;

/// The two controlled vehicles.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Cav {
    C,
    One,
}

impl Cav {
    pub const ALL: [Cav; 2] = [Cav::C, Cav::One];

    pub fn u_slot(self) -> usize {
        match self {
            Cav::C => 0,
            Cav::One => 2,
        }
    }

    pub fn phi_slot(self) -> usize {
        self.u_slot() + 1
    }

    pub fn label(self) -> &'static str {
        match self {
            Cav::C => "C",
            Cav::One => "1",
        }
    }
}

/// The four safety pairs. The first vehicle named is the ego whose speed scales the ellipse.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PairId {
    CH,
    OneC,
    OneH,
    CU,
}

impl PairId {
    pub const ALL: [PairId; 4] = [PairId::CH, PairId::OneC, PairId::OneH, PairId::CU];

    pub fn ego(self) -> Cav {
        match self {
            PairId::CH | PairId::CU => Cav::C,
            PairId::OneC | PairId::OneH => Cav::One,
        }
    }

    pub fn index(self) -> usize {
        match self {
            PairId::CH => 0,
            PairId::OneC => 1,
            PairId::OneH => 2,
            PairId::CU => 3,
        }
    }

    /// Wire/log label: `CH`, `1C`, `1H`, `CU`.
    pub fn label(self) -> &'static str {
        match self {
            PairId::CH => "CH",
            PairId::OneC => "1C",
            PairId::OneH => "1H",
            PairId::CU => "CU",
        }
    }
}

/// Which constraint a row encodes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RowTag {
    Pair(PairId),
    SpeedMin(Cav),
    SpeedMax(Cav),
    LaneLower(Cav),
    LaneUpper(Cav),
    SpeedTracking(Cav),
    LaneTracking(Cav),
    Bound { slot: usize, upper: bool },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RowKind {
    Cbf,
    Clf,
    Box,
}

/// One affine-in-control inequality.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConstraintRow<T> {
    pub kind: RowKind,
    pub tag: RowTag,
    pub c_f: T,
    pub c_g: [T; N_DECISION],
}

impl<T: Scalar> ConstraintRow<T> {
    pub fn cbf(tag: RowTag, c_f: T, c_g: [T; N_DECISION]) -> Self {
        Self {
            kind: RowKind::Cbf,
            tag,
            c_f,
            c_g,
        }
    }

    /// `c_f + c_g·z`.
    pub fn value(&self, z: &[T]) -> T {
        self.c_g.iter().zip(z).fold(self.c_f, |acc, (g, zi)| acc + *g * *zi)
    }

    /// Signed satisfaction margin: non-negative iff the row holds at `z`.
    pub fn margin(&self, z: &[T]) -> T {
        match self.kind {
            RowKind::Cbf | RowKind::Box => self.value(z),
            RowKind::Clf => -self.value(z),
        }
    }

    pub fn is_cbf(&self) -> bool {
        self.kind == RowKind::Cbf
    }
}

/// Ellipse weights and class-K gains.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BarrierParams<T> {
    /// Longitudinal ellipse weight of C [s].
    pub a_c: T,
    /// Lateral ellipse weight of C [s].
    pub b_c: T,
    pub a_1: T,
    pub b_1: T,
    /// Linear class-K gains of the four pair barriers, in `CH, 1C, 1H, CU` order [1/s].
    pub k_pair: [T; 4],
    /// Gain of the speed-limit barriers [1/s].
    pub k_speed: T,
    /// Gain of the lateral-band barriers [1/s].
    pub k_lane: T,
}

impl<T: Scalar> Default for BarrierParams<T> {
    fn default() -> Self {
        Self {
            a_c: T::lit(0.6),
            b_c: T::lit(0.1),
            a_1: T::lit(0.6),
            b_1: T::lit(0.1),
            k_pair: [T::one(); 4],
            k_speed: T::one(),
            k_lane: T::one(),
        }
    }
}

impl<T: Scalar> BarrierParams<T> {
    /// `(a, b)` of the ego vehicle's ellipse.
    pub fn axes(&self, ego: Cav) -> (T, T) {
        match ego {
            Cav::C => (self.a_c, self.b_c),
            Cav::One => (self.a_1, self.b_1),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let pos = [self.a_c, self.b_c, self.a_1, self.b_1, self.k_speed, self.k_lane]
            .into_iter()
            .chain(self.k_pair)
            .all(|p| p > T::zero() && p.is_finite());
        if pos {
            Ok(())
        } else {
            Err(Error::Config("barrier weights and gains must be positive".into()))
        }
    }
}

/// Speed limits and lane geometry of the CAVs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoadLimits<T> {
    pub lane_width: T,
    pub v_min: T,
    pub v_max: T,
}

impl<T: Scalar> Default for RoadLimits<T> {
    fn default() -> Self {
        Self {
            lane_width: T::lit(4.0),
            v_min: T::lit(15.0),
            v_max: T::lit(35.0),
        }
    }
}

/// Box bounds on each CAV's `(u, phi)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControlBounds<T> {
    pub u_min: T,
    pub u_max: T,
    pub phi_min: T,
    pub phi_max: T,
}

impl<T: Scalar> Default for ControlBounds<T> {
    fn default() -> Self {
        Self {
            u_min: T::lit(-7.0),
            u_max: T::lit(3.3),
            phi_min: -T::FRAC_PI_4(),
            phi_max: T::FRAC_PI_4(),
        }
    }
}

/// CLF tracking parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClfParams<T> {
    /// Exponential rates `m_1..m_4` [1/s].
    pub m: [T; 4],
    /// Desired speed [m/s].
    pub v_d: T,
    /// Lane width; the target lane center is `y = lane_width`.
    pub lane_width: T,
}

impl<T: Scalar> Default for ClfParams<T> {
    fn default() -> Self {
        Self {
            m: [T::one(); 4],
            v_d: T::lit(30.0),
            lane_width: T::lit(4.0),
        }
    }
}

/// QP objective weights: `alpha_u_c u_C² + alpha_u_1 u_1² + alpha_phi (phi_C² + phi_1²) + Σ p_j δ_j²`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QpWeights<T> {
    pub alpha_u_c: T,
    pub alpha_u_1: T,
    /// Steering regularization; keeps the objective strictly convex.
    pub alpha_phi: T,
    pub p: [T; 4],
}

impl<T: Scalar> Default for QpWeights<T> {
    fn default() -> Self {
        Self {
            alpha_u_c: T::one(),
            alpha_u_1: T::one(),
            alpha_phi: T::lit(0.1),
            p: [T::one(), T::one(), T::lit(100.0), T::one()],
        }
    }
}

impl<T: Scalar> QpWeights<T> {
    pub fn scaled(&self, s: T) -> Self {
        Self {
            alpha_u_c: self.alpha_u_c * s,
            alpha_u_1: self.alpha_u_1 * s,
            alpha_phi: self.alpha_phi * s,
            p: self.p.map(|p| p * s),
        }
    }

    fn diagonal(&self) -> [T; N_DECISION] {
        [
            self.alpha_u_c,
            self.alpha_phi,
            self.alpha_u_1,
            self.alpha_phi,
            self.p[0],
            self.p[1],
            self.p[2],
            self.p[3],
        ]
    }
}

/// How the non-ego vehicle of a pair moves, as far as the controller knows.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OtherMotion<T> {
    /// A CAV in the joint QP; its steering enters `c_g`.
    Controlled(Cav),
    /// Known drift `(v cosθ, v sinθ)` only (constant-speed vehicle, or the HDV when its model is given).
    Drift,
    /// The HDV seen through its adaptive model; positions are `x̄ + e`, velocities `f_a(x̄) + h + ė`.
    Adaptive {
        terms: AdaptiveTerms<T>,
        error: ErrorVector<T>,
        error_rate: ErrorVector<T>,
    },
}

/// Pair barrier in polynomial form: `Δx²/a² + Δy²/b² - v_ego²`.
pub fn barrier_value<T: Scalar>(
    pair: PairId,
    ego: &VehicleState<T>,
    other: &VehicleState<T>,
    params: &BarrierParams<T>,
) -> T {
    let (a, b) = params.axes(pair.ego());
    let dx = ego.x - other.x;
    let dy = ego.y - other.y;
    dx * dx / (a * a) + dy * dy / (b * b) - ego.v * ego.v
}

/// Position and planar velocity of the other vehicle as used by the pair row.
fn other_kinematics<T: Scalar>(other: &VehicleState<T>, motion: &OtherMotion<T>) -> (T, T, T, T) {
    let (s, c) = other.theta.sin_cos();
    match motion {
        OtherMotion::Controlled(_) | OtherMotion::Drift => (other.x, other.y, other.v * c, other.v * s),
        OtherMotion::Adaptive {
            terms,
            error,
            error_rate,
        } => (
            other.x + error.x,
            other.y + error.y,
            other.v * c + terms.h_x + error_rate.x,
            other.v * s + terms.h_y + error_rate.y,
        ),
    }
}

/// Lie-derivative CBF row `L_f b + k b + L_g b · z >= 0` for a pair.
pub fn cbf_row_pair<T: Scalar>(
    pair: PairId,
    ego: &VehicleState<T>,
    other: &VehicleState<T>,
    motion: &OtherMotion<T>,
    params: &BarrierParams<T>,
) -> ConstraintRow<T> {
    let ego_cav = pair.ego();
    let (a, b) = params.axes(ego_cav);
    let k = params.k_pair[pair.index()];
    let (ox, oy, ovx, ovy) = other_kinematics(other, motion);
    let dx = ego.x - ox;
    let dy = ego.y - oy;
    let p = T::two() * dx / (a * a);
    let q = T::two() * dy / (b * b);
    let (se, ce) = ego.theta.sin_cos();
    let barrier = dx * dx / (a * a) + dy * dy / (b * b) - ego.v * ego.v;
    let lf = p * (ego.v * ce - ovx) + q * (ego.v * se - ovy);

    let mut c_g = [T::zero(); N_DECISION];
    c_g[ego_cav.u_slot()] = -T::two() * ego.v;
    c_g[ego_cav.phi_slot()] = ego.v * (q * ce - p * se);
    if let OtherMotion::Controlled(o) = motion {
        let (so, co) = other.theta.sin_cos();
        c_g[o.phi_slot()] = other.v * (p * so - q * co);
    }
    ConstraintRow::cbf(RowTag::Pair(pair), lf + k * barrier, c_g)
}

/// Speed and lateral-band CBF rows for one CAV.
pub fn limit_cbf_rows<T: Scalar>(
    cav: Cav,
    state: &VehicleState<T>,
    limits: &RoadLimits<T>,
    params: &BarrierParams<T>,
) -> [ConstraintRow<T>; 4] {
    let (s, c) = state.theta.sin_cos();
    let l = limits.lane_width;
    let half = l / T::two();
    let ks = params.k_speed;
    let kl = params.k_lane;
    let unit = |slot: usize, val: T| {
        let mut g = [T::zero(); N_DECISION];
        g[slot] = val;
        g
    };
    [
        ConstraintRow::cbf(
            RowTag::SpeedMin(cav),
            ks * (state.v - limits.v_min),
            unit(cav.u_slot(), T::one()),
        ),
        ConstraintRow::cbf(
            RowTag::SpeedMax(cav),
            ks * (limits.v_max - state.v),
            unit(cav.u_slot(), -T::one()),
        ),
        ConstraintRow::cbf(
            RowTag::LaneLower(cav),
            state.v * s + kl * (state.y + half),
            unit(cav.phi_slot(), state.v * c),
        ),
        ConstraintRow::cbf(
            RowTag::LaneUpper(cav),
            -state.v * s + kl * (T::lit(3.0) * half - state.y),
            unit(cav.phi_slot(), -state.v * c),
        ),
    ]
}

/// Soft speed- and lane-tracking CLF rows, `[V1 (C speed), V2 (1 speed), V3 (C lane), V4 (1 lane)]`.
pub fn clf_rows<T: Scalar>(
    cav_c: &VehicleState<T>,
    cav_1: &VehicleState<T>,
    params: &ClfParams<T>,
) -> [ConstraintRow<T>; 4] {
    let two = T::two();
    let speed = |cav: Cav, s: &VehicleState<T>, m: T, j: usize| {
        let dv = s.v - params.v_d;
        let mut g = [T::zero(); N_DECISION];
        g[cav.u_slot()] = two * dv;
        g[SLACK_OFFSET + j] = -T::one();
        ConstraintRow {
            kind: RowKind::Clf,
            tag: RowTag::SpeedTracking(cav),
            c_f: m * dv * dv,
            c_g: g,
        }
    };
    let lane = |cav: Cav, s: &VehicleState<T>, m: T, j: usize| {
        let dy = s.y - params.lane_width;
        let (sn, cs) = s.theta.sin_cos();
        let mut g = [T::zero(); N_DECISION];
        g[cav.phi_slot()] = two * dy * s.v * cs;
        g[SLACK_OFFSET + j] = -T::one();
        ConstraintRow {
            kind: RowKind::Clf,
            tag: RowTag::LaneTracking(cav),
            c_f: two * dy * s.v * sn + m * dy * dy,
            c_g: g,
        }
    };
    [
        speed(Cav::C, cav_c, params.m[0], 0),
        speed(Cav::One, cav_1, params.m[1], 1),
        lane(Cav::C, cav_c, params.m[2], 2),
        lane(Cav::One, cav_1, params.m[3], 3),
    ]
}

/// Everything the constraint builders need about the world at one instant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scene<T> {
    pub cav_c: VehicleState<T>,
    pub cav_1: VehicleState<T>,
    /// HDV state as used by the controller (estimate, or truth when its model is known).
    pub hdv: VehicleState<T>,
    pub hdv_motion: OtherMotion<T>,
    pub slow: VehicleState<T>,
}

impl<T: Scalar> Scene<T> {
    pub fn cav(&self, cav: Cav) -> &VehicleState<T> {
        match cav {
            Cav::C => &self.cav_c,
            Cav::One => &self.cav_1,
        }
    }

    /// Other vehicle of a pair and how it moves.
    pub fn other(&self, pair: PairId) -> (&VehicleState<T>, OtherMotion<T>) {
        match pair {
            PairId::CH | PairId::OneH => (&self.hdv, self.hdv_motion),
            PairId::OneC => (&self.cav_c, OtherMotion::Controlled(Cav::C)),
            PairId::CU => (&self.slow, OtherMotion::Drift),
        }
    }

    /// Barrier value of a pair using the HDV position the controller believes (`x̄ + e`).
    pub fn barrier(&self, pair: PairId, params: &BarrierParams<T>) -> T {
        let (other, motion) = self.other(pair);
        let mut pos = *other;
        if let OtherMotion::Adaptive { error, .. } = motion {
            pos.x = pos.x + error.x;
            pos.y = pos.y + error.y;
        }
        barrier_value(pair, self.cav(pair.ego()), &pos, params)
    }
}

/// All CBF rows (4 pairs, then 4 limit rows per CAV) followed by the 4 CLF rows.
pub fn nominal_rows<T: Scalar>(
    scene: &Scene<T>,
    limits: &RoadLimits<T>,
    barrier: &BarrierParams<T>,
    clf: &ClfParams<T>,
) -> Vec<ConstraintRow<T>> {
    let mut rows = Vec::with_capacity(16);
    for pair in PairId::ALL {
        let (other, motion) = scene.other(pair);
        rows.push(cbf_row_pair(pair, scene.cav(pair.ego()), other, &motion, barrier));
    }
    for cav in Cav::ALL {
        rows.extend(limit_cbf_rows(cav, scene.cav(cav), limits, barrier));
    }
    rows.extend(clf_rows(&scene.cav_c, &scene.cav_1, clf));
    rows
}

/// Builds the QP: minimize the weighted objective subject to every row and the control box.
///
/// Rows are rescaled to unit infinity-norm in `z`; this changes multipliers but
/// not the feasible set or the minimizer. Slacks are constrained to `δ >= 0`.
pub fn assemble_qp<T: Scalar>(
    rows: &[ConstraintRow<T>],
    weights: &QpWeights<T>,
    bounds: &ControlBounds<T>,
) -> Result<QpProblem<T>> {
    let diag = weights.diagonal();
    if diag.iter().any(|w| *w < T::zero() || !w.is_finite()) {
        return Err(Error::Config("QP weights must be finite and non-negative".into()));
    }
    let n = N_DECISION;
    let mut h = vec![T::zero(); n * n];
    for (i, w) in diag.iter().enumerate() {
        h[i * n + i] = T::two() * *w;
    }
    let f = vec![T::zero(); n];

    let mut a = Vec::with_capacity(rows.len() * n);
    let mut b = Vec::with_capacity(rows.len());
    for row in rows {
        // A·z <= b form.
        let (coef, rhs): ([T; N_DECISION], T) = match row.kind {
            RowKind::Cbf | RowKind::Box => (row.c_g.map(|g| -g), row.c_f),
            RowKind::Clf => (row.c_g, -row.c_f),
        };
        let scale = coef.iter().fold(T::zero(), |m, c| m.max(c.abs()));
        let scale = if scale > T::zero() { scale } else { T::one() };
        a.extend(coef.iter().map(|c| *c / scale));
        b.push(rhs / scale);
    }

    let inf = T::infinity();
    let lb = vec![
        bounds.u_min,
        bounds.phi_min,
        bounds.u_min,
        bounds.phi_min,
        T::zero(),
        T::zero(),
        T::zero(),
        T::zero(),
    ];
    let ub = vec![
        bounds.u_max,
        bounds.phi_max,
        bounds.u_max,
        bounds.phi_max,
        inf,
        inf,
        inf,
        inf,
    ];
    QpProblem::new(n, h, f, a, b, lb, ub)
}
