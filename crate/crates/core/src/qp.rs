//! Dense convex QP solver (dual active set) with KKT verification.
//!
//! Problems have the form `min ½ zᵀHz + fᵀz  s.t.  A z <= b,  lb <= z <= ub`.
//! For positive-definite `H` the Goldfarb–Idnani dual method is used directly.
//! A singular PSD `H` is handled by proximal-point iterations on `H + ρI`.

use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct QpProblem<T> {
    pub n: usize,
    /// Row-major `n × n`.
    pub h: Vec<T>,
    pub f: Vec<T>,
    /// Row-major `m × n`.
    pub a: Vec<T>,
    pub b: Vec<T>,
    pub lb: Vec<T>,
    pub ub: Vec<T>,
}

impl<T: Scalar> QpProblem<T> {
    pub fn new(n: usize, h: Vec<T>, f: Vec<T>, a: Vec<T>, b: Vec<T>, lb: Vec<T>, ub: Vec<T>) -> Result<Self> {
        if n == 0 {
            return Err(Error::Dimension("empty decision vector".into()));
        }
        if h.len() != n * n || f.len() != n || lb.len() != n || ub.len() != n {
            return Err(Error::Dimension(format!(
                "n = {n}: H has {} entries, f {}, lb {}, ub {}",
                h.len(),
                f.len(),
                lb.len(),
                ub.len()
            )));
        }
        if a.len() != b.len() * n {
            return Err(Error::Dimension(format!(
                "A has {} entries for {} rows of width {n}",
                a.len(),
                b.len()
            )));
        }
        if h.iter().chain(&f).chain(&a).chain(&b).any(|x| !x.is_finite()) {
            return Err(Error::Config("QP data must be finite".into()));
        }
        for i in 0..n {
            for j in 0..i {
                let (x, y) = (h[i * n + j], h[j * n + i]);
                if (x - y).abs() > T::tiny() * T::one().max(x.abs()).max(y.abs()) {
                    return Err(Error::Config(format!("H is not symmetric at ({i}, {j})")));
                }
            }
            if lb[i].is_nan() || ub[i].is_nan() || lb[i] > ub[i] {
                return Err(Error::InvalidInterval {
                    what: format!("z[{i}] bounds"),
                    lo: lb[i].to_f64().unwrap_or(f64::NAN),
                    hi: ub[i].to_f64().unwrap_or(f64::NAN),
                });
            }
        }
        Ok(Self { n, h, f, a, b, lb, ub })
    }

    pub fn rows(&self) -> usize {
        self.b.len()
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.a[i * self.n..(i + 1) * self.n]
    }

    pub fn objective(&self, z: &[T]) -> T {
        let n = self.n;
        let mut acc = T::zero();
        for i in 0..n {
            let hz = (0..n).fold(T::zero(), |s, j| s + self.h[i * n + j] * z[j]);
            acc = acc + z[i] * (hz / T::two() + self.f[i]);
        }
        acc
    }

    /// Largest violation of any row or bound at `z` (zero when feasible).
    pub fn max_violation(&self, z: &[T]) -> T {
        let mut v = T::zero();
        for i in 0..self.rows() {
            v = v.max(dot(self.row(i), z) - self.b[i]);
        }
        for i in 0..self.n {
            v = v.max(self.lb[i] - z[i]).max(z[i] - self.ub[i]);
        }
        v
    }

    /// Same problem with `H` and `f` multiplied by `s`.
    pub fn with_cost_scaled(&self, s: T) -> Self {
        let mut p = self.clone();
        p.h.iter_mut().chain(p.f.iter_mut()).for_each(|x| *x = *x * s);
        p
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QpStatus {
    Optimal,
    Infeasible,
    MaxIter,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution<T> {
    pub z: Vec<T>,
    pub status: QpStatus,
    /// Multipliers of the `A z <= b` rows.
    pub lambda: Vec<T>,
    /// Multipliers of `z >= lb`.
    pub mu_lower: Vec<T>,
    /// Multipliers of `z <= ub`.
    pub mu_upper: Vec<T>,
    pub kkt_residual: T,
    pub iterations: usize,
    pub solve_time: Duration,
    /// For infeasible problems: non-negative weights over (rows, lower bounds, upper bounds)
    /// whose combination has zero normal and negative right-hand side.
    pub certificate: Option<Vec<T>>,
    pub max_violation: T,
}

impl<T: Scalar> QpSolution<T> {
    pub fn is_optimal(&self) -> bool {
        self.status == QpStatus::Optimal
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverOptions {
    pub max_iter: usize,
    /// Feasibility tolerance, relative to `max(1, |b_i|)`.
    pub feas_tol: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            max_iter: 200,
            feas_tol: 1e-11,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KktReport<T> {
    pub stationarity: T,
    pub primal: T,
    pub dual: T,
    pub complementarity: T,
}

impl<T: Scalar> KktReport<T> {
    pub fn max(&self) -> T {
        self.stationarity
            .max(self.primal)
            .max(self.dual)
            .max(self.complementarity)
    }

    pub fn passes(&self, tol: T) -> bool {
        self.max() <= tol
    }
}

pub fn solve<T: Scalar>(problem: &QpProblem<T>) -> QpSolution<T> {
    solve_with(problem, &SolverOptions::default())
}

pub fn solve_with<T: Scalar>(problem: &QpProblem<T>, opts: &SolverOptions) -> QpSolution<T> {
    let start = Instant::now();
    let cons = Constraints::new(problem);
    let raw = match cholesky(problem.n, &problem.h) {
        Some(l) => DualActiveSet::new(problem, &cons, &l, &problem.f).run(opts, opts.max_iter),
        None => proximal(problem, &cons, opts),
    };
    finish(problem, &cons, raw, start.elapsed())
}

/// Per-condition KKT residuals. Stationarity and complementarity are scaled by
/// the magnitude of the terms involved; primal and dual residuals are absolute.
pub fn verify_kkt<T: Scalar>(problem: &QpProblem<T>, sol: &QpSolution<T>) -> KktReport<T> {
    let n = problem.n;
    let z = &sol.z;
    let mut grad = vec![T::zero(); n];
    let mut scale = T::one();
    for i in 0..n {
        let hz = (0..n).fold(T::zero(), |s, j| s + problem.h[i * n + j] * z[j]);
        grad[i] = hz + problem.f[i] - sol.mu_lower[i] + sol.mu_upper[i];
        scale = scale
            .max(hz.abs())
            .max(problem.f[i].abs())
            .max(sol.mu_lower[i].abs())
            .max(sol.mu_upper[i].abs());
    }
    let mut mult_scale = T::one();
    for (r, lam) in sol.lambda.iter().enumerate() {
        for (g, a) in grad.iter_mut().zip(problem.row(r)) {
            *g = *g + *a * *lam;
            scale = scale.max((*a * *lam).abs());
        }
        mult_scale = mult_scale.max(lam.abs());
    }
    let stationarity = grad.iter().fold(T::zero(), |m, g| m.max(g.abs())) / scale;

    let primal = problem.max_violation(z);

    let dual = sol
        .lambda
        .iter()
        .chain(&sol.mu_lower)
        .chain(&sol.mu_upper)
        .fold(T::zero(), |m, x| {
            mult_scale = mult_scale.max(x.abs());
            m.max(-*x)
        });

    let mut comp = T::zero();
    for (r, lam) in sol.lambda.iter().enumerate() {
        comp = comp.max((*lam * (problem.b[r] - dot(problem.row(r), z))).abs());
    }
    for i in 0..n {
        if problem.lb[i].is_finite() {
            comp = comp.max((sol.mu_lower[i] * (z[i] - problem.lb[i])).abs());
        }
        if problem.ub[i].is_finite() {
            comp = comp.max((sol.mu_upper[i] * (problem.ub[i] - z[i])).abs());
        }
    }
    KktReport {
        stationarity,
        primal,
        dual,
        complementarity: comp / mult_scale,
    }
}

fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |s, (x, y)| s + *x * *y)
}

fn inf_norm<T: Scalar>(v: &[T]) -> T {
    v.iter().fold(T::zero(), |m, x| m.max(x.abs()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Con {
    Row(usize),
    Lower(usize),
    Upper(usize),
}

/// All inequalities as `g·z <= r`, with infinite bounds dropped.
struct Constraints {
    list: Vec<Con>,
    rows: usize,
    n: usize,
}

impl Constraints {
    fn new<T: Scalar>(p: &QpProblem<T>) -> Self {
        let mut list: Vec<Con> = (0..p.rows()).map(Con::Row).collect();
        for i in 0..p.n {
            if p.lb[i].is_finite() {
                list.push(Con::Lower(i));
            }
            if p.ub[i].is_finite() {
                list.push(Con::Upper(i));
            }
        }
        Self {
            list,
            rows: p.rows(),
            n: p.n,
        }
    }

    fn dot<T: Scalar>(&self, p: &QpProblem<T>, c: usize, v: &[T]) -> T {
        match self.list[c] {
            Con::Row(r) => dot(p.row(r), v),
            Con::Lower(i) => -v[i],
            Con::Upper(i) => v[i],
        }
    }

    fn rhs<T: Scalar>(&self, p: &QpProblem<T>, c: usize) -> T {
        match self.list[c] {
            Con::Row(r) => p.b[r],
            Con::Lower(i) => -p.lb[i],
            Con::Upper(i) => p.ub[i],
        }
    }

    fn normal<T: Scalar>(&self, p: &QpProblem<T>, c: usize) -> Vec<T> {
        match self.list[c] {
            Con::Row(r) => p.row(r).to_vec(),
            Con::Lower(i) => {
                let mut g = vec![T::zero(); self.n];
                g[i] = -T::one();
                g
            }
            Con::Upper(i) => {
                let mut g = vec![T::zero(); self.n];
                g[i] = T::one();
                g
            }
        }
    }

    /// Position of a constraint in the certificate layout (rows, lower, upper).
    fn certificate_slot(&self, c: usize) -> usize {
        match self.list[c] {
            Con::Row(r) => r,
            Con::Lower(i) => self.rows + i,
            Con::Upper(i) => self.rows + self.n + i,
        }
    }
}

struct RawResult<T> {
    z: Vec<T>,
    status: QpStatus,
    /// `(constraint index, multiplier)` of the final active set.
    active: Vec<(usize, T)>,
    iterations: usize,
    certificate: Option<Vec<(usize, T)>>,
}

struct DualActiveSet<'a, T> {
    p: &'a QpProblem<T>,
    cons: &'a Constraints,
    f: &'a [T],
    /// Cholesky factor of `H`.
    l: Vec<T>,
    /// Dense `H⁻¹`.
    hinv: Vec<T>,
}

impl<'a, T: Scalar> DualActiveSet<'a, T> {
    fn new(p: &'a QpProblem<T>, cons: &'a Constraints, l: &[T], f: &'a [T]) -> Self {
        let n = p.n;
        let mut hinv = vec![T::zero(); n * n];
        let mut e = vec![T::zero(); n];
        for j in 0..n {
            e.iter_mut().for_each(|x| *x = T::zero());
            e[j] = T::one();
            let col = chol_solve(n, l, &e);
            for i in 0..n {
                hinv[i * n + j] = col[i];
            }
        }
        Self {
            p,
            cons,
            f,
            l: l.to_vec(),
            hinv,
        }
    }

    fn hinv_mul(&self, v: &[T]) -> Vec<T> {
        let n = self.p.n;
        (0..n).map(|i| dot(&self.hinv[i * n..(i + 1) * n], v)).collect()
    }

    /// Most violated inactive constraint at `z`, if any exceeds tolerance.
    fn most_violated(&self, z: &[T], active: &[(usize, T)], tol: T) -> Option<(usize, T)> {
        let mut best: Option<(usize, T)> = None;
        for c in 0..self.cons.list.len() {
            if active.iter().any(|(a, _)| *a == c) {
                continue;
            }
            let r = self.cons.rhs(self.p, c);
            let s = self.cons.dot(self.p, c, z) - r;
            if s > tol * T::one().max(r.abs()) && best.is_none_or(|(_, bs)| s > bs) {
                best = Some((c, s));
            }
        }
        best
    }

    fn run(&self, opts: &SolverOptions, max_iter: usize) -> RawResult<T> {
        let n = self.p.n;
        let tol = T::lit(opts.feas_tol);
        let mut z: Vec<T> = self.hinv_mul(self.f).into_iter().map(|x| -x).collect();
        let mut active: Vec<(usize, T)> = Vec::new();
        let mut iterations = 0;

        loop {
            let Some((p, _)) = self.most_violated(&z, &active, tol) else {
                return RawResult {
                    z,
                    status: QpStatus::Optimal,
                    active,
                    iterations,
                    certificate: None,
                };
            };
            let np: Vec<T> = self.cons.normal(self.p, p).into_iter().map(|x| -x).collect();
            let mut lam_p = T::zero();
            loop {
                iterations += 1;
                if iterations > max_iter {
                    return RawResult {
                        z,
                        status: QpStatus::MaxIter,
                        active,
                        iterations: iterations - 1,
                        certificate: None,
                    };
                }
                let Directions { step, r, denom, full } = self.directions(&active, &np);
                // Largest dual step keeping active multipliers non-negative.
                let mut t1 = T::infinity();
                let mut drop_at = None;
                for (k, ((_, lam), rk)) in active.iter().zip(&r).enumerate() {
                    if *rk > T::zero() {
                        let t = *lam / *rk;
                        if t < t1 {
                            t1 = t;
                            drop_at = Some(k);
                        }
                    }
                }
                let null_step = denom <= T::lit(1e-22) * full;
                if null_step {
                    let Some(k) = drop_at else {
                        let mut cert = vec![(p, T::one())];
                        cert.extend(active.iter().zip(&r).map(|((c, _), rk)| (*c, (-*rk).max(T::zero()))));
                        return RawResult {
                            z,
                            status: QpStatus::Infeasible,
                            active,
                            iterations,
                            certificate: Some(cert),
                        };
                    };
                    for ((_, lam), rk) in active.iter_mut().zip(&r) {
                        *lam = *lam - t1 * *rk;
                    }
                    lam_p = lam_p + t1;
                    active.remove(k);
                    continue;
                }
                let s = self.cons.dot(self.p, p, &z) - self.cons.rhs(self.p, p);
                let t2 = (s / denom).max(T::zero());
                let t = t1.min(t2);
                for i in 0..n {
                    z[i] = z[i] + t * step[i];
                }
                for ((_, lam), rk) in active.iter_mut().zip(&r) {
                    *lam = (*lam - t * *rk).max(T::zero());
                }
                lam_p = lam_p + t;
                if t2 <= t1 {
                    active.push((p, lam_p));
                    break;
                }
                if let Some(k) = drop_at {
                    active.remove(k);
                }
            }
        }
    }

    /// Primal and dual steps for adding `n_p`, from a Householder QR of the
    /// active normals in the metric of `H⁻¹` (`B = L⁻¹N`, `c = L⁻¹n_p`).
    /// The step is `L⁻ᵀ` applied to the part of `c` orthogonal to `B`, and
    /// `denom = |that part|²`, `full = |c|²`.
    fn directions(&self, active: &[(usize, T)], np: &[T]) -> Directions<T> {
        let n = self.p.n;
        let k = active.len();
        let mut c = forward(n, &self.l, np);
        let full = dot(&c, &c);
        // Columns of B, stored column-major.
        let mut bm: Vec<T> = Vec::with_capacity(n * k);
        for (con, _) in active {
            bm.extend(forward(n, &self.l, &self.cons.normal(self.p, *con)));
        }
        let mut reflectors: Vec<Vec<T>> = Vec::with_capacity(k);
        for j in 0..k {
            let col = &bm[j * n + j..(j + 1) * n];
            let norm = col.iter().fold(T::zero(), |s, x| s + *x * *x).sqrt();
            let mut v = col.to_vec();
            if norm > T::zero() {
                let alpha = if v[0] > T::zero() { -norm } else { norm };
                v[0] = v[0] - alpha;
            }
            let vv = dot(&v, &v);
            let apply = |x: &mut [T]| {
                if vv > T::zero() {
                    let f = (T::one() + T::one()) * dot(&v, x) / vv;
                    for (xi, vi) in x.iter_mut().zip(&v) {
                        *xi = *xi - f * *vi;
                    }
                }
            };
            for jj in j..k {
                apply(&mut bm[jj * n + j..(jj + 1) * n]);
            }
            apply(&mut c[j..]);
            reflectors.push(v);
        }
        let denom = c[k..].iter().fold(T::zero(), |s, x| s + *x * *x);
        // `R r = -Q₁ᵀc`, so that `c + B r` is the orthogonal part.
        let mut r = vec![T::zero(); k];
        for i in (0..k).rev() {
            let mut acc = -c[i];
            for j in i + 1..k {
                acc = acc - bm[j * n + i] * r[j];
            }
            let d = bm[i * n + i];
            r[i] = if d.abs() > T::zero() { acc / d } else { T::zero() };
        }
        let mut e = c;
        e[..k].iter_mut().for_each(|x| *x = T::zero());
        for (j, v) in reflectors.iter().enumerate().rev() {
            let vv = dot(v, v);
            if vv > T::zero() {
                let f = (T::one() + T::one()) * dot(v, &e[j..]) / vv;
                for (xi, vi) in e[j..].iter_mut().zip(v) {
                    *xi = *xi - f * *vi;
                }
            }
        }
        Directions {
            step: backward(n, &self.l, &e),
            r,
            denom,
            full,
        }
    }
}

struct Directions<T> {
    step: Vec<T>,
    r: Vec<T>,
    denom: T,
    full: T,
}

/// Proximal-point outer loop for singular `H`.
fn proximal<T: Scalar>(p: &QpProblem<T>, cons: &Constraints, opts: &SolverOptions) -> RawResult<T> {
    let n = p.n;
    let diag_max = (0..n).fold(T::one(), |m, i| m.max(p.h[i * n + i].abs()));
    let rho = T::lit(1e-2) * diag_max;
    let mut hr = p.h.clone();
    for i in 0..n {
        hr[i * n + i] = hr[i * n + i] + rho;
    }
    let Some(l) = cholesky(n, &hr) else {
        // Not PSD.
        return RawResult {
            z: vec![T::nan(); n],
            status: QpStatus::MaxIter,
            active: Vec::new(),
            iterations: 0,
            certificate: None,
        };
    };
    let shifted = QpProblem { h: hr, ..p.clone() };
    let mut z = vec![T::zero(); n];
    let mut total = 0;
    for _ in 0..5000 {
        let f: Vec<T> = p.f.iter().zip(&z).map(|(fi, zi)| *fi - rho * *zi).collect();
        let inner = DualActiveSet::new(&shifted, cons, &l, &f);
        let res = inner.run(opts, opts.max_iter);
        total += res.iterations;
        if res.status != QpStatus::Optimal {
            return RawResult {
                iterations: total,
                ..res
            };
        }
        let delta = res.z.iter().zip(&z).fold(T::zero(), |m, (a, b)| m.max((*a - *b).abs()));
        let scale = T::one().max(inf_norm(&res.z));
        z = res.z.clone();
        if delta <= T::lit(1e-13) * scale {
            return RawResult {
                iterations: total,
                ..res
            };
        }
    }
    RawResult {
        z,
        status: QpStatus::MaxIter,
        active: Vec::new(),
        iterations: total,
        certificate: None,
    }
}

fn finish<T: Scalar>(p: &QpProblem<T>, cons: &Constraints, raw: RawResult<T>, elapsed: Duration) -> QpSolution<T> {
    let n = p.n;
    let mut lambda = vec![T::zero(); p.rows()];
    let mut mu_lower = vec![T::zero(); n];
    let mut mu_upper = vec![T::zero(); n];
    for (c, lam) in &raw.active {
        match cons.list[*c] {
            Con::Row(r) => lambda[r] = *lam,
            Con::Lower(i) => mu_lower[i] = *lam,
            Con::Upper(i) => mu_upper[i] = *lam,
        }
    }
    let certificate = raw.certificate.map(|entries| {
        let mut y = vec![T::zero(); p.rows() + 2 * n];
        for (c, w) in entries {
            y[cons.certificate_slot(c)] = w;
        }
        y
    });
    let max_violation = if raw.z.iter().all(|x| x.is_finite()) {
        p.max_violation(&raw.z)
    } else {
        T::infinity()
    };
    let mut sol = QpSolution {
        z: raw.z,
        status: raw.status,
        lambda,
        mu_lower,
        mu_upper,
        kkt_residual: T::infinity(),
        iterations: raw.iterations,
        solve_time: elapsed,
        certificate,
        max_violation,
    };
    if sol.status == QpStatus::Optimal {
        sol.kkt_residual = verify_kkt(p, &sol).max();
    }
    sol
}

/// Lower-triangular Cholesky factor (row-major), or `None` if not positive definite.
fn cholesky<T: Scalar>(n: usize, a: &[T]) -> Option<Vec<T>> {
    let mut l = vec![T::zero(); n * n];
    let scale = (0..n).fold(T::zero(), |m, i| m.max(a[i * n + i].abs()));
    for j in 0..n {
        let mut d = a[j * n + j];
        for k in 0..j {
            d = d - l[j * n + k] * l[j * n + k];
        }
        if !(d > T::tiny() * scale) {
            return None;
        }
        let d = d.sqrt();
        l[j * n + j] = d;
        for i in j + 1..n {
            let mut s = a[i * n + j];
            for k in 0..j {
                s = s - l[i * n + k] * l[j * n + k];
            }
            l[i * n + j] = s / d;
        }
    }
    Some(l)
}

fn chol_solve<T: Scalar>(n: usize, l: &[T], b: &[T]) -> Vec<T> {
    backward(n, l, &forward(n, l, b))
}

/// `L⁻¹ v` for lower-triangular `L`.
fn forward<T: Scalar>(n: usize, l: &[T], v: &[T]) -> Vec<T> {
    let mut y = v.to_vec();
    for i in 0..n {
        for k in 0..i {
            y[i] = y[i] - l[i * n + k] * y[k];
        }
        y[i] = y[i] / l[i * n + i];
    }
    y
}

/// `L⁻ᵀ v` for lower-triangular `L`.
fn backward<T: Scalar>(n: usize, l: &[T], v: &[T]) -> Vec<T> {
    let mut y = v.to_vec();
    for i in (0..n).rev() {
        for k in i + 1..n {
            y[i] = y[i] - l[k * n + i] * y[k];
        }
        y[i] = y[i] / l[i * n + i];
    }
    y
}
