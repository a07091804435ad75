//! Worst-case constraint rows over the uncertainty region anchored at a trigger instant.
//!
//! For a pair row the drift term is minimized over every vehicle state in its
//! box, the HDV error `e` and error rate `ė`. The expression splits into a
//! convex quadratic in the relative position `(Δx, Δy)` plus terms that, for a
//! fixed relative position, are minimized exactly in closed form (speed enters
//! at its endpoints, heading through a sinusoid over its interval). The outer
//! minimization over `(Δx, Δy)` uses a grid of starts refined by
//! convex-concave iterations.

use serde::{Deserialize, Serialize};

use crate::barrier::{
    BarrierParams, Cav, ConstraintRow, OtherMotion, PairId, RoadLimits, RowKind, RowTag, Scene, N_DECISION,
};
use crate::error::{Error, Result};
use crate::interval::{Interval, SinusoidRange};
use crate::scalar::Scalar;
use crate::vehicle::{AdaptiveTerms, VehicleState};

/// Error, error-rate and per-vehicle drift bounds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BoundVectors<T> {
    /// `|e| <= w` componentwise, `[x m, y m, θ rad, v m/s]`.
    pub w: [T; 4],
    /// `|ė| <= nu`.
    pub nu: [T; 4],
    /// Trigger thresholds on each vehicle's state drift since the last event.
    pub s_c: [T; 4],
    pub s_1: [T; 4],
    pub s_h: [T; 4],
    pub s_u: [T; 4],
}

impl<T: Scalar> Default for BoundVectors<T> {
    fn default() -> Self {
        let s = [T::lit(0.01), T::lit(0.005), T::lit(0.01), T::one()];
        Self {
            w: [T::lit(0.2), T::lit(0.1), T::lit(0.1), T::one()],
            nu: [T::lit(0.5), T::lit(0.2), T::lit(0.1), T::one()],
            s_c: s,
            s_1: s,
            s_h: s,
            s_u: s,
        }
    }
}

impl<T: Scalar> BoundVectors<T> {
    pub fn zero() -> Self {
        let z = [T::zero(); 4];
        Self {
            w: z,
            nu: z,
            s_c: z,
            s_1: z,
            s_h: z,
            s_u: z,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = self
            .w
            .iter()
            .chain(&self.nu)
            .chain(&self.s_c)
            .chain(&self.s_1)
            .chain(&self.s_h)
            .chain(&self.s_u);
        for v in all {
            if !(*v >= T::zero()) || !v.is_finite() {
                return Err(Error::Config("bound vectors must be finite and non-negative".into()));
            }
        }
        Ok(())
    }
}

/// Interval hull of one vehicle's state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StateBox<T> {
    pub x: Interval<T>,
    pub y: Interval<T>,
    pub theta: Interval<T>,
    pub v: Interval<T>,
}

impl<T: Scalar> StateBox<T> {
    pub fn around(s: &VehicleState<T>, r: &[T; 4]) -> Result<Self> {
        Ok(Self {
            x: Interval::around(s.x, r[0])?,
            y: Interval::around(s.y, r[1])?,
            theta: Interval::around(s.theta, r[2])?,
            v: Interval::around(s.v, r[3])?,
        })
    }

    pub fn point(s: &VehicleState<T>) -> Self {
        Self {
            x: Interval::point(s.x),
            y: Interval::point(s.y),
            theta: Interval::point(s.theta),
            v: Interval::point(s.v),
        }
    }

    pub fn contains(&self, s: &VehicleState<T>) -> bool {
        self.x.contains(s.x) && self.y.contains(s.y) && self.theta.contains(s.theta) && self.v.contains(s.v)
    }
}

/// The region the controller must be robust to until the next trigger.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UncertaintyBox<T> {
    pub cav_c: StateBox<T>,
    pub cav_1: StateBox<T>,
    /// Anchored at the state the controller uses for the HDV (its estimate in adaptive mode).
    pub hdv: StateBox<T>,
    pub slow: StateBox<T>,
    /// HDV position/heading/speed error `e`.
    pub error: [Interval<T>; 4],
    /// HDV error rate `ė`.
    pub error_rate: [Interval<T>; 4],
    pub hdv_terms: AdaptiveTerms<T>,
    pub hdv_adaptive: bool,
    pub anchor_time: T,
}

impl<T: Scalar> UncertaintyBox<T> {
    pub fn vehicle(&self, cav: Cav) -> &StateBox<T> {
        match cav {
            Cav::C => &self.cav_c,
            Cav::One => &self.cav_1,
        }
    }
}

/// Builds the box at trigger time `t_k`. Error and rate intervals are centered
/// on the scene's current `e` and `ė` (both zero right after synchronization).
pub fn build_uncertainty_box<T: Scalar>(
    scene: &Scene<T>,
    bounds: &BoundVectors<T>,
    t_k: T,
) -> Result<UncertaintyBox<T>> {
    bounds.validate()?;
    let (error, error_rate, terms, adaptive) = match scene.hdv_motion {
        OtherMotion::Adaptive {
            terms,
            error,
            error_rate,
        } => {
            let e = error.to_array();
            let ed = error_rate.to_array();
            let mut ei = [Interval::point(T::zero()); 4];
            let mut edi = ei;
            for j in 0..4 {
                ei[j] = Interval::around(e[j], bounds.w[j])?;
                edi[j] = Interval::around(ed[j], bounds.nu[j])?;
            }
            (ei, edi, terms, true)
        }
        _ => (
            [Interval::point(T::zero()); 4],
            [Interval::point(T::zero()); 4],
            AdaptiveTerms::zero(),
            false,
        ),
    };
    Ok(UncertaintyBox {
        cav_c: StateBox::around(&scene.cav_c, &bounds.s_c)?,
        cav_1: StateBox::around(&scene.cav_1, &bounds.s_1)?,
        hdv: StateBox::around(&scene.hdv, &bounds.s_h)?,
        slow: StateBox::around(&scene.slow, &bounds.s_u)?,
        error,
        error_rate,
        hdv_terms: terms,
        hdv_adaptive: adaptive,
        anchor_time: t_k,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RobustOptions {
    /// Grid points per relative-position dimension used as refinement starts.
    pub grid: usize,
    /// Convex-concave refinement iterations per start.
    pub refine_iters: usize,
}

impl Default for RobustOptions {
    fn default() -> Self {
        Self {
            grid: 3,
            refine_iters: 20,
        }
    }
}

/// Sign of each control channel `[u_C, phi_C, u_1, phi_1]` in the nominal solution.
/// `true` means non-negative: the robust row then uses the channel's minimum coefficient.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ControlSigns(pub [bool; 4]);

impl ControlSigns {
    pub const NON_NEGATIVE: Self = Self([true; 4]);

    pub fn from_solution<T: Scalar>(z: &[T]) -> Self {
        Self([0, 1, 2, 3].map(|j| z[j] >= T::zero()))
    }

    /// Whether `z` has the signs assumed here, ignoring channels with `|z_j| <= tol`.
    pub fn consistent_with<T: Scalar>(&self, z: &[T], tol: T) -> bool {
        (0..4).all(|j| z[j].abs() <= tol || (z[j] >= T::zero()) == self.0[j])
    }
}

/// Everything a pair row depends on, as intervals.
struct PairRegion<T> {
    dx: Interval<T>,
    dy: Interval<T>,
    a2: T,
    b2: T,
    k: T,
    ego_v: Interval<T>,
    ego_theta: Interval<T>,
    other_v: Interval<T>,
    other_theta: Interval<T>,
    /// Velocity added to the other vehicle's kinematic velocity (`h + ė`).
    extra_vx: Interval<T>,
    extra_vy: Interval<T>,
    other_controlled: Option<Cav>,
}

/// Drift-term value at a fixed relative position with the remaining variables minimized,
/// and the gradient of the linear piece attaining it.
struct InnerMin<T> {
    value: T,
    /// `∂/∂(Δx)` and `∂/∂(Δy)` of the attaining piece, excluding the convex quadratic.
    ax: T,
    ay: T,
}

impl<T: Scalar> PairRegion<T> {
    fn new(pair: PairId, bx: &UncertaintyBox<T>, params: &BarrierParams<T>) -> Self {
        let ego = bx.vehicle(pair.ego());
        let (other, controlled, adaptive) = match pair {
            PairId::CH | PairId::OneH => (&bx.hdv, None, bx.hdv_adaptive),
            PairId::OneC => (&bx.cav_c, Some(Cav::C), false),
            PairId::CU => (&bx.slow, None, false),
        };
        let (mut ox, mut oy) = (other.x, other.y);
        let (mut evx, mut evy) = (Interval::point(T::zero()), Interval::point(T::zero()));
        if adaptive {
            ox = ox.add(&bx.error[0]);
            oy = oy.add(&bx.error[1]);
            evx = bx.error_rate[0].shift(bx.hdv_terms.h_x);
            evy = bx.error_rate[1].shift(bx.hdv_terms.h_y);
        }
        let (a, b) = params.axes(pair.ego());
        Self {
            dx: ego.x.sub(&ox),
            dy: ego.y.sub(&oy),
            a2: a * a,
            b2: b * b,
            k: params.k_pair[pair.index()],
            ego_v: ego.v,
            ego_theta: ego.theta,
            other_v: other.v,
            other_theta: other.theta,
            extra_vx: evx,
            extra_vy: evy,
            other_controlled: controlled,
        }
    }

    fn quad(&self, dx: T, dy: T) -> T {
        self.k * (dx * dx / self.a2 + dy * dy / self.b2)
    }

    fn inner(&self, dx: T, dy: T) -> InnerMin<T> {
        let two = T::two();
        let p = two * dx / self.a2;
        let q = two * dy / self.b2;

        // Ego: min over (v, θ) of v (p cos θ + q sin θ) - k v².
        let s_ego = SinusoidRange::of(p, q, &self.ego_theta);
        let mut best_ego = (T::infinity(), T::zero(), T::zero());
        for v in self.ego_v.endpoints() {
            let (val, th) = if v >= T::zero() {
                (v * s_ego.min, s_ego.argmin)
            } else {
                (v * s_ego.max, s_ego.argmax)
            };
            let val = val - self.k * v * v;
            if val < best_ego.0 {
                best_ego = (val, v, th);
            }
        }
        let (ego_val, ve, te) = best_ego;

        // Other: min of -v (p cos θ + q sin θ), i.e. minus the maximum.
        let so = SinusoidRange::of(p, q, &self.other_theta).scaled_by(&self.other_v);
        let (vo, to) = so.max_at;
        let other_val = -so.max;

        // Additive velocity: min of -p·vx - q·vy.
        let vx = if p >= T::zero() {
            self.extra_vx.hi
        } else {
            self.extra_vx.lo
        };
        let vy = if q >= T::zero() {
            self.extra_vy.hi
        } else {
            self.extra_vy.lo
        };

        let value = self.quad(dx, dy) + ego_val + other_val - p * vx - q * vy;
        let (se, ce) = te.sin_cos();
        let (sn, cs) = to.sin_cos();
        InnerMin {
            value,
            ax: two / self.a2 * (ve * ce - vo * cs - vx),
            ay: two / self.b2 * (ve * se - vo * sn - vy),
        }
    }

    /// Minimizer of `quad + ax·Δx + ay·Δy` over the relative-position box.
    fn convex_step(&self, ax: T, ay: T) -> (T, T) {
        let pick = |iv: &Interval<T>, g: T, curv: T| {
            if curv > T::zero() {
                iv.clamp(-g / (T::two() * curv))
            } else if g > T::zero() {
                iv.lo
            } else {
                iv.hi
            }
        };
        (
            pick(&self.dx, ax, self.k / self.a2),
            pick(&self.dy, ay, self.k / self.b2),
        )
    }

    fn minimize(&self, opts: &RobustOptions) -> T {
        let mut best = T::infinity();
        for sx in self.dx.grid(opts.grid.max(2)) {
            for sy in self.dy.grid(opts.grid.max(2)) {
                let (mut x, mut y) = (sx, sy);
                let mut cur = self.inner(x, y);
                best = best.min(cur.value);
                for _ in 0..opts.refine_iters {
                    let (nx, ny) = self.convex_step(cur.ax, cur.ay);
                    if nx == x && ny == y {
                        break;
                    }
                    let next = self.inner(nx, ny);
                    if !(next.value < cur.value) {
                        break;
                    }
                    x = nx;
                    y = ny;
                    cur = next;
                    best = best.min(cur.value);
                }
            }
        }
        best
    }

    /// Ranges of the ego steering coefficient `v (q cos θ - p sin θ)` and, for a
    /// controlled other vehicle, its coefficient `v (p sin θ - q cos θ)`.
    fn steering_ranges(&self) -> (Interval<T>, Option<Interval<T>>) {
        let two = T::two();
        let mut ego = (T::infinity(), T::neg_infinity());
        let mut other = (T::infinity(), T::neg_infinity());
        for dx in self.dx.endpoints() {
            for dy in self.dy.endpoints() {
                let p = two * dx / self.a2;
                let q = two * dy / self.b2;
                let e = SinusoidRange::of(q, -p, &self.ego_theta).scaled_by(&self.ego_v);
                ego = (ego.0.min(e.min), ego.1.max(e.max));
                if self.other_controlled.is_some() {
                    let o = SinusoidRange::of(-q, p, &self.other_theta).scaled_by(&self.other_v);
                    other = (other.0.min(o.min), other.1.max(o.max));
                }
            }
        }
        let ego = Interval { lo: ego.0, hi: ego.1 };
        let other = self.other_controlled.map(|_| Interval {
            lo: other.0,
            hi: other.1,
        });
        (ego, other)
    }
}

/// Minimum of `L_f b + k b` for a pair over the box.
pub fn robust_lf_min<T: Scalar>(
    pair: PairId,
    bx: &UncertaintyBox<T>,
    params: &BarrierParams<T>,
    opts: &RobustOptions,
) -> T {
    PairRegion::new(pair, bx, params).minimize(opts)
}

/// Ranges of each non-zero control coefficient of a pair row over the box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LgRange<T> {
    pub u_ego: Interval<T>,
    pub phi_ego: Interval<T>,
    pub phi_other: Option<Interval<T>>,
}

pub fn robust_lg_range<T: Scalar>(pair: PairId, bx: &UncertaintyBox<T>, params: &BarrierParams<T>) -> LgRange<T> {
    let region = PairRegion::new(pair, bx, params);
    let (phi_ego, phi_other) = region.steering_ranges();
    let v = region.ego_v;
    LgRange {
        u_ego: Interval {
            lo: -T::two() * v.hi,
            hi: -T::two() * v.lo,
        },
        phi_ego,
        phi_other,
    }
}

fn pick<T: Scalar>(iv: &Interval<T>, non_negative: bool) -> T {
    if non_negative {
        iv.lo
    } else {
        iv.hi
    }
}

/// Sign-split control coefficients of a pair row: the minimum over the box for
/// channels whose nominal control is non-negative, the maximum otherwise.
pub fn robust_lg_min<T: Scalar>(
    pair: PairId,
    bx: &UncertaintyBox<T>,
    params: &BarrierParams<T>,
    signs: &ControlSigns,
) -> [T; N_DECISION] {
    let r = robust_lg_range(pair, bx, params);
    let ego = pair.ego();
    let mut g = [T::zero(); N_DECISION];
    g[ego.u_slot()] = pick(&r.u_ego, signs.0[ego.u_slot()]);
    g[ego.phi_slot()] = pick(&r.phi_ego, signs.0[ego.phi_slot()]);
    if let (Some(iv), PairId::OneC) = (r.phi_other, pair) {
        let slot = Cav::C.phi_slot();
        g[slot] = pick(&iv, signs.0[slot]);
    }
    g
}

/// Robust version of a speed or lateral-band row of one CAV.
fn robust_limit_row<T: Scalar>(
    tag: RowTag,
    cav: Cav,
    bx: &UncertaintyBox<T>,
    limits: &RoadLimits<T>,
    params: &BarrierParams<T>,
    signs: &ControlSigns,
) -> ConstraintRow<T> {
    let s = bx.vehicle(cav);
    let ks = params.k_speed;
    let kl = params.k_lane;
    let half = limits.lane_width / T::two();
    let mut g = [T::zero(); N_DECISION];
    let phi_nonneg = signs.0[cav.phi_slot()];
    let c_f = match tag {
        RowTag::SpeedMin(_) => {
            g[cav.u_slot()] = T::one();
            ks * (s.v.lo - limits.v_min)
        }
        RowTag::SpeedMax(_) => {
            g[cav.u_slot()] = -T::one();
            ks * (limits.v_max - s.v.hi)
        }
        RowTag::LaneLower(_) => {
            let drift = SinusoidRange::of(T::zero(), T::one(), &s.theta).scaled_by(&s.v);
            let coef = SinusoidRange::of(T::one(), T::zero(), &s.theta).scaled_by(&s.v);
            g[cav.phi_slot()] = if phi_nonneg { coef.min } else { coef.max };
            drift.min + kl * (s.y.lo + half)
        }
        RowTag::LaneUpper(_) => {
            let drift = SinusoidRange::of(T::zero(), -T::one(), &s.theta).scaled_by(&s.v);
            let coef = SinusoidRange::of(-T::one(), T::zero(), &s.theta).scaled_by(&s.v);
            g[cav.phi_slot()] = if phi_nonneg { coef.min } else { coef.max };
            drift.min + kl * (T::lit(3.0) * half - s.y.hi)
        }
        _ => unreachable!("not a limit row"),
    };
    ConstraintRow::cbf(tag, c_f, g)
}

/// Replaces every CBF row by its worst case over the box; CLF rows pass through.
pub fn robustify_rows<T: Scalar>(
    rows: &[ConstraintRow<T>],
    bx: &UncertaintyBox<T>,
    limits: &RoadLimits<T>,
    params: &BarrierParams<T>,
    signs: &ControlSigns,
    opts: &RobustOptions,
) -> Vec<ConstraintRow<T>> {
    rows.iter()
        .map(|row| {
            if row.kind != RowKind::Cbf {
                return *row;
            }
            match row.tag {
                RowTag::Pair(pair) => ConstraintRow::cbf(
                    row.tag,
                    robust_lf_min(pair, bx, params, opts),
                    robust_lg_min(pair, bx, params, signs),
                ),
                RowTag::SpeedMin(c) | RowTag::SpeedMax(c) | RowTag::LaneLower(c) | RowTag::LaneUpper(c) => {
                    robust_limit_row(row.tag, c, bx, limits, params, signs)
                }
                _ => *row,
            }
        })
        .collect()
}
