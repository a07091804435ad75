//! Closed intervals and extremes of sinusoids over angle intervals.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval<T> {
    pub lo: T,
    pub hi: T,
}

impl<T: Scalar> Interval<T> {
    pub fn new(lo: T, hi: T) -> Result<Self> {
        if lo <= hi {
            Ok(Self { lo, hi })
        } else {
            Err(Error::InvalidInterval {
                what: "interval".into(),
                lo: lo.to_f64().unwrap_or(f64::NAN),
                hi: hi.to_f64().unwrap_or(f64::NAN),
            })
        }
    }

    pub fn point(x: T) -> Self {
        Self { lo: x, hi: x }
    }

    /// `[c - r, c + r]`; `r` must be non-negative.
    pub fn around(c: T, r: T) -> Result<Self> {
        Self::new(c - r, c + r)
    }

    pub fn contains(&self, x: T) -> bool {
        self.lo <= x && x <= self.hi
    }

    pub fn width(&self) -> T {
        self.hi - self.lo
    }

    pub fn mid(&self) -> T {
        (self.lo + self.hi) / T::two()
    }

    pub fn is_point(&self) -> bool {
        self.lo == self.hi
    }

    pub fn endpoints(&self) -> [T; 2] {
        [self.lo, self.hi]
    }

    pub fn add(&self, o: &Self) -> Self {
        Self {
            lo: self.lo + o.lo,
            hi: self.hi + o.hi,
        }
    }

    pub fn sub(&self, o: &Self) -> Self {
        Self {
            lo: self.lo - o.hi,
            hi: self.hi - o.lo,
        }
    }

    pub fn shift(&self, d: T) -> Self {
        Self {
            lo: self.lo + d,
            hi: self.hi + d,
        }
    }

    /// `m` evenly spaced points including both endpoints (one point if degenerate or `m < 2`).
    pub fn grid(&self, m: usize) -> Vec<T> {
        if self.is_point() || m < 2 {
            return vec![if m < 2 { self.mid() } else { self.lo }];
        }
        let step = self.width() / T::lit((m - 1) as f64);
        (0..m)
            .map(|i| {
                if i + 1 == m {
                    self.hi
                } else {
                    self.lo + step * T::lit(i as f64)
                }
            })
            .collect()
    }

    pub fn clamp(&self, x: T) -> T {
        x.max(self.lo).min(self.hi)
    }

    /// Smallest interval containing `self` and `x`.
    pub fn hull_with(&self, x: T) -> Self {
        Self {
            lo: self.lo.min(x),
            hi: self.hi.max(x),
        }
    }
}

/// Extremes of `p cos θ + q sin θ` over an angle interval, with their arguments.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SinusoidRange<T> {
    pub min: T,
    pub argmin: T,
    pub max: T,
    pub argmax: T,
}

impl<T: Scalar> SinusoidRange<T> {
    pub fn of(p: T, q: T, theta: &Interval<T>) -> Self {
        let f = |th: T| p * th.cos() + q * th.sin();
        let mut r = Self {
            min: f(theta.lo),
            argmin: theta.lo,
            max: f(theta.lo),
            argmax: theta.lo,
        };
        let mut consider = |th: T| {
            let v = f(th);
            if v < r.min {
                r.min = v;
                r.argmin = th;
            }
            if v > r.max {
                r.max = v;
                r.argmax = th;
            }
        };
        consider(theta.hi);
        if p == T::zero() && q == T::zero() {
            return r;
        }
        // Critical angles are psi (maximum) and psi + pi (minimum), modulo 2 pi.
        let psi = q.atan2(p);
        let two_pi = T::two() * T::PI();
        for base in [psi, psi + T::PI()] {
            let k0 = ((theta.lo - base) / two_pi).ceil();
            let mut th = base + k0 * two_pi;
            while th <= theta.hi {
                consider(th);
                th = th + two_pi;
            }
        }
        r
    }

    /// Extremes of `v · (p cos θ + q sin θ)` for `v` in an interval.
    pub fn scaled_by(&self, v: &Interval<T>) -> ScaledExtremes<T> {
        let mut out = ScaledExtremes {
            min: T::infinity(),
            min_at: (v.lo, self.argmin),
            max: T::neg_infinity(),
            max_at: (v.lo, self.argmax),
        };
        for vv in v.endpoints() {
            let (lo, lo_th) = if vv >= T::zero() {
                (vv * self.min, self.argmin)
            } else {
                (vv * self.max, self.argmax)
            };
            let (hi, hi_th) = if vv >= T::zero() {
                (vv * self.max, self.argmax)
            } else {
                (vv * self.min, self.argmin)
            };
            if lo < out.min {
                out.min = lo;
                out.min_at = (vv, lo_th);
            }
            if hi > out.max {
                out.max = hi;
                out.max_at = (vv, hi_th);
            }
        }
        out
    }
}

/// Extremes of a speed-scaled sinusoid and the `(v, θ)` attaining them.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScaledExtremes<T> {
    pub min: T,
    pub min_at: (T, T),
    pub max: T,
    pub max_at: (T, T),
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn construction_and_arithmetic() {
        let a = Interval::around(20.0f64, 0.01).unwrap();
        assert!(a.contains(20.0));
        assert!((a.lo - 19.99).abs() < 1e-12 && (a.hi - 20.01).abs() < 1e-12);
        assert!(Interval::new(1.0, 0.0).is_err());
        assert!(Interval::around(0.0, -1.0).is_err());
        let b = Interval::new(1.0, 2.0).unwrap();
        assert_eq!(
            a.sub(&b),
            Interval {
                lo: a.lo - 2.0,
                hi: a.hi - 1.0
            }
        );
        assert_eq!(b.grid(3), vec![1.0, 1.5, 2.0]);
        assert_eq!(Interval::point(3.0).grid(3), vec![3.0]);
    }

    #[test]
    fn sinusoid_interior_extremes() {
        let r = SinusoidRange::of(1.0, 0.0, &Interval::new(-1.0, 1.0).unwrap());
        assert_eq!(r.max, 1.0);
        assert_eq!(r.argmax, 0.0);
        assert!((r.min - 1.0f64.cos()).abs() < 1e-15);

        let r = SinusoidRange::of(0.0f64, 2.0, &Interval::new(0.0, 7.0).unwrap());
        assert!((r.max - 2.0).abs() < 1e-15 && (r.min + 2.0).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn sinusoid_range_bounds_samples(
            p in -10.0f64..10.0, q in -10.0f64..10.0,
            lo in -4.0f64..4.0, w in 0.0f64..3.0,
        ) {
            let iv = Interval::new(lo, lo + w).unwrap();
            let r = SinusoidRange::of(p, q, &iv);
            for i in 0..=200 {
                let th = lo + w * i as f64 / 200.0;
                let f = p * th.cos() + q * th.sin();
                prop_assert!(f >= r.min - 1e-12 && f <= r.max + 1e-12);
            }
            prop_assert!(iv.contains(r.argmin) && iv.contains(r.argmax));
            prop_assert!((p * r.argmin.cos() + q * r.argmin.sin() - r.min).abs() < 1e-12);
        }

        #[test]
        fn interval_difference_contains_pointwise_differences(
            a in -5.0f64..5.0, ra in 0.0f64..1.0, b in -5.0f64..5.0, rb in 0.0f64..1.0,
            ta in 0.0f64..1.0, tb in 0.0f64..1.0,
        ) {
            let ia = Interval::around(a, ra).unwrap();
            let ib = Interval::around(b, rb).unwrap();
            let x = ia.lo + ta * ia.width();
            let y = ib.lo + tb * ib.width();
            prop_assert!(ia.sub(&ib).contains(x - y) || (ia.sub(&ib).lo - (x - y)).abs() < 1e-12 || (ia.sub(&ib).hi - (x - y)).abs() < 1e-12);
        }
    }
}
