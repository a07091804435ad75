//! Vehicle states, the three dynamics models and the adaptive HDV estimator.
//!
//! * CAVs follow a kinematic bicycle model that is affine in `(u, phi)`.
//! * The true HDV follows the same structure with multiplicative and additive
//!   random disturbances; the controller never sees this model.
//! * The controller tracks the HDV with an adaptive model whose correction
//!   terms are re-synchronized from measurements at every control event.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;

/// Pose and speed of a vehicle.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct VehicleState<T> {
    /// Longitudinal position [m].
    pub x: T,
    /// Lateral position [m]; `y = 0` is the center of the slow lane.
    pub y: T,
    /// Heading [rad].
    pub theta: T,
    /// Speed [m/s].
    pub v: T,
}

impl<T: Scalar> VehicleState<T> {
    pub fn new(x: T, y: T, theta: T, v: T) -> Self {
        Self { x, y, theta, v }
    }

    pub fn to_array(&self) -> [T; 4] {
        [self.x, self.y, self.theta, self.v]
    }

    pub fn from_array(a: [T; 4]) -> Self {
        Self::new(a[0], a[1], a[2], a[3])
    }

    /// `self + h * rate`, componentwise.
    pub fn advanced(&self, rate: &StateDerivative<T>, h: T) -> Self {
        Self {
            x: self.x + h * rate.x,
            y: self.y + h * rate.y,
            theta: self.theta + h * rate.theta,
            v: self.v + h * rate.v,
        }
    }

    pub fn cast<U: Scalar>(&self) -> VehicleState<U> {
        let c = |t: T| U::lit(t.to_f64().unwrap_or(f64::NAN));
        VehicleState::new(c(self.x), c(self.y), c(self.theta), c(self.v))
    }
}

/// Acceleration and steering angle.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ControlInput<T> {
    /// Acceleration [m/s²].
    pub u: T,
    /// Steering angle [rad].
    pub phi: T,
}

impl<T: Scalar> ControlInput<T> {
    pub fn new(u: T, phi: T) -> Self {
        Self { u, phi }
    }

    pub fn zero() -> Self {
        Self::new(T::zero(), T::zero())
    }

    /// Clamps both channels into symmetric physical limits and reports whether anything changed.
    pub fn clamped_sym(&self, u_abs: T, phi_abs: T) -> (Self, bool) {
        let u = self.u.max(-u_abs).min(u_abs);
        let phi = self.phi.max(-phi_abs).min(phi_abs);
        (Self::new(u, phi), u != self.u || phi != self.phi)
    }
}

/// Time derivative of a [`VehicleState`].
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct StateDerivative<T> {
    pub x: T,
    pub y: T,
    pub theta: T,
    pub v: T,
}

impl<T: Scalar> StateDerivative<T> {
    pub fn new(x: T, y: T, theta: T, v: T) -> Self {
        Self { x, y, theta, v }
    }

    pub fn to_array(&self) -> [T; 4] {
        [self.x, self.y, self.theta, self.v]
    }
}

/// Additive corrections `h_x, h_y, h_theta, h_v` of the adaptive HDV model.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct AdaptiveTerms<T> {
    pub h_x: T,
    pub h_y: T,
    pub h_theta: T,
    pub h_v: T,
}

impl<T: Scalar> AdaptiveTerms<T> {
    pub fn zero() -> Self {
        Self {
            h_x: T::zero(),
            h_y: T::zero(),
            h_theta: T::zero(),
            h_v: T::zero(),
        }
    }

    pub fn new(h_x: T, h_y: T, h_theta: T, h_v: T) -> Self {
        Self { h_x, h_y, h_theta, h_v }
    }
}

/// HDV measurement error `e = x_H - x̄_H`, or its rate `ė` (same layout, rate units).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ErrorVector<T> {
    pub x: T,
    pub y: T,
    pub theta: T,
    pub v: T,
}

impl<T: Scalar> ErrorVector<T> {
    pub fn zero() -> Self {
        Self::from_array([T::zero(); 4])
    }

    pub fn from_array(a: [T; 4]) -> Self {
        Self {
            x: a[0],
            y: a[1],
            theta: a[2],
            v: a[3],
        }
    }

    pub fn to_array(&self) -> [T; 4] {
        [self.x, self.y, self.theta, self.v]
    }

    pub fn is_zero(&self) -> bool {
        self.to_array().iter().all(|c| c.is_zero())
    }
}

/// Ranges of the random factors in the true HDV model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DisturbanceConfig {
    /// Range of the multiplicative factors `sigma1, sigma2`.
    pub sigma_range: [f64; 2],
    /// Ranges of the additive disturbances `eps1..eps4`.
    pub eps_ranges: [[f64; 2]; 4],
    /// When false every sample is neutral (`sigma = 1`, `eps = 0`); the RNG is still advanced.
    #[serde(default = "default_true")]
    pub enabled: bool,
}

fn default_true() -> bool {
    true
}

impl Default for DisturbanceConfig {
    fn default() -> Self {
        Self {
            sigma_range: [0.9, 1.1],
            eps_ranges: [[-0.7, 0.7], [-0.5, 0.5], [-0.5, 0.5], [-0.7, 0.7]],
            enabled: true,
        }
    }
}

impl DisturbanceConfig {
    pub fn neutral() -> Self {
        Self {
            enabled: false,
            ..Self::default()
        }
    }

    pub fn is_well_ordered(&self) -> bool {
        let ok = |r: &[f64; 2]| r[0].is_finite() && r[1].is_finite() && r[0] <= r[1];
        ok(&self.sigma_range) && self.eps_ranges.iter().all(ok)
    }

    /// Draws one sample. Always consumes exactly six uniforms so that streams stay
    /// aligned whether or not disturbances are enabled.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DisturbanceSample {
        let mut draw = |r: &[f64; 2]| {
            let unit: f64 = rng.gen();
            r[0] + (r[1] - r[0]) * unit
        };
        let sigma1 = draw(&self.sigma_range);
        let sigma2 = draw(&self.sigma_range);
        let eps = [
            draw(&self.eps_ranges[0]),
            draw(&self.eps_ranges[1]),
            draw(&self.eps_ranges[2]),
            draw(&self.eps_ranges[3]),
        ];
        if self.enabled {
            DisturbanceSample { sigma1, sigma2, eps }
        } else {
            DisturbanceSample::neutral()
        }
    }
}

/// One realization of the HDV disturbance, held constant over a micro-step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DisturbanceSample {
    pub sigma1: f64,
    pub sigma2: f64,
    pub eps: [f64; 4],
}

impl DisturbanceSample {
    pub fn neutral() -> Self {
        Self {
            sigma1: 1.0,
            sigma2: 1.0,
            eps: [0.0; 4],
        }
    }
}

impl Default for DisturbanceSample {
    fn default() -> Self {
        Self::neutral()
    }
}

/// Kinematic bicycle model of a CAV: drift `(v cosθ, v sinθ, 0, 0)` plus
/// `g_u = (0, 0, 0, 1)` and `g_phi = (-v sinθ, v cosθ, v/L_w, 0)`.
pub fn cav_derivative<T: Scalar>(
    state: &VehicleState<T>,
    control: &ControlInput<T>,
    wheelbase: T,
) -> StateDerivative<T> {
    debug_assert!(wheelbase > T::zero());
    let (s, c) = state.theta.sin_cos();
    let v = state.v;
    StateDerivative::new(
        v * c - v * s * control.phi,
        v * s + v * c * control.phi,
        v / wheelbase * control.phi,
        control.u,
    )
}

/// Drift part of the bicycle model only (what a constant-speed vehicle follows).
pub fn drift_derivative<T: Scalar>(state: &VehicleState<T>) -> StateDerivative<T> {
    let (s, c) = state.theta.sin_cos();
    StateDerivative::new(state.v * c, state.v * s, T::zero(), T::zero())
}

/// True (hidden) HDV dynamics for a given disturbance realization.
pub fn hdv_true_derivative_with<T: Scalar>(
    state: &VehicleState<T>,
    control: &ControlInput<T>,
    wheelbase: T,
    sample: &DisturbanceSample,
) -> StateDerivative<T> {
    let (s, c) = state.theta.sin_cos();
    let v = state.v;
    let sigma1 = T::lit(sample.sigma1);
    let sigma2 = T::lit(sample.sigma2);
    let eps = sample.eps.map(T::lit);
    StateDerivative::new(
        v * c * sigma1 - v * s * control.phi + eps[0],
        v * s * sigma2 + v * c * control.phi + eps[1],
        v / wheelbase * control.phi + eps[2],
        control.u + eps[3],
    )
}

/// True HDV dynamics with a fresh disturbance sample drawn from `rng`.
pub fn hdv_true_derivative<T: Scalar, R: Rng + ?Sized>(
    state: &VehicleState<T>,
    control: &ControlInput<T>,
    wheelbase: T,
    cfg: &DisturbanceConfig,
    rng: &mut R,
) -> StateDerivative<T> {
    let sample = cfg.sample(rng);
    hdv_true_derivative_with(state, control, wheelbase, &sample)
}

/// Adaptive HDV model: `(v̄ cosθ̄ + h_x, v̄ sinθ̄ + h_y, v̄/L_w + h_θ, h_v)`.
///
/// The heading row carries no steering factor; `h_theta` absorbs the difference.
pub fn hdv_adaptive_derivative<T: Scalar>(
    est: &VehicleState<T>,
    terms: &AdaptiveTerms<T>,
    wheelbase: T,
) -> StateDerivative<T> {
    let (s, c) = est.theta.sin_cos();
    StateDerivative::new(
        est.v * c + terms.h_x,
        est.v * s + terms.h_y,
        est.v / wheelbase + terms.h_theta,
        terms.h_v,
    )
}

/// One classical fourth-order Runge–Kutta step of size `dt`.
pub fn integrate_step<T, F>(state: &VehicleState<T>, derivative: F, dt: T) -> VehicleState<T>
where
    T: Scalar,
    F: Fn(&VehicleState<T>) -> StateDerivative<T>,
{
    let half = dt / T::two();
    let k1 = derivative(state);
    let k2 = derivative(&state.advanced(&k1, half));
    let k3 = derivative(&state.advanced(&k2, half));
    let k4 = derivative(&state.advanced(&k3, dt));
    let six = T::lit(6.0);
    let two = T::two();
    let comb = |a: T, b: T, c: T, d: T| (a + two * b + two * c + d) / six;
    VehicleState {
        x: state.x + dt * comb(k1.x, k2.x, k3.x, k4.x),
        y: state.y + dt * comb(k1.y, k2.y, k3.y, k4.y),
        theta: state.theta + dt * comb(k1.theta, k2.theta, k3.theta, k4.theta),
        v: state.v + dt * comb(k1.v, k2.v, k3.v, k4.v),
    }
}

/// `true - estimated`, componentwise.
pub fn measure_error<T: Scalar>(truth: &VehicleState<T>, est: &VehicleState<T>) -> ErrorVector<T> {
    ErrorVector {
        x: truth.x - est.x,
        y: truth.y - est.y,
        theta: truth.theta - est.theta,
        v: truth.v - est.v,
    }
}

/// Error rate: measured true derivative minus the adaptive-model derivative.
pub fn measure_error_rate<T: Scalar>(
    true_rate: &StateDerivative<T>,
    model_rate: &StateDerivative<T>,
) -> ErrorVector<T> {
    ErrorVector {
        x: true_rate.x - model_rate.x,
        y: true_rate.y - model_rate.y,
        theta: true_rate.theta - model_rate.theta,
        v: true_rate.v - model_rate.v,
    }
}

/// Adds the accumulated error rates to the adaptive terms and resets the estimate
/// onto the measured state, so that the error is exactly zero afterwards.
pub fn synchronize_adaptive_model<T: Scalar>(
    terms: &AdaptiveTerms<T>,
    error_dot_history: &[ErrorVector<T>],
    true_state: &VehicleState<T>,
) -> (AdaptiveTerms<T>, VehicleState<T>) {
    let mut out = *terms;
    for ed in error_dot_history {
        out.h_x = out.h_x + ed.x;
        out.h_y = out.h_y + ed.y;
        out.h_theta = out.h_theta + ed.theta;
        out.h_v = out.h_v + ed.v;
    }
    (out, *true_state)
}

/// The controller-side HDV estimate: adaptive state plus correction terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdaptiveEstimator<T> {
    pub state: VehicleState<T>,
    pub terms: AdaptiveTerms<T>,
}

impl<T: Scalar> AdaptiveEstimator<T> {
    /// Starts on the measured state with all corrections at zero.
    pub fn new(initial: VehicleState<T>) -> Self {
        Self {
            state: initial,
            terms: AdaptiveTerms::zero(),
        }
    }

    pub fn rate(&self, wheelbase: T) -> StateDerivative<T> {
        hdv_adaptive_derivative(&self.state, &self.terms, wheelbase)
    }

    pub fn propagate(&mut self, dt: T, wheelbase: T) {
        let terms = self.terms;
        self.state = integrate_step(&self.state, |s| hdv_adaptive_derivative(s, &terms, wheelbase), dt);
    }

    /// Synchronizes on a measurement of the true state and derivative.
    ///
    /// The error rate feeding the update is taken at the reset state, so the
    /// model derivative matches the measured derivative right after the event.
    /// Returns the error rate that was absorbed.
    pub fn synchronize(
        &mut self,
        truth: &VehicleState<T>,
        true_rate: &StateDerivative<T>,
        wheelbase: T,
    ) -> ErrorVector<T> {
        let model = hdv_adaptive_derivative(truth, &self.terms, wheelbase);
        let absorbed = measure_error_rate(true_rate, &model);
        let (terms, state) = synchronize_adaptive_model(&self.terms, &[absorbed], truth);
        self.terms = terms;
        self.state = state;
        absorbed
    }
}
