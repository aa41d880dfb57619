//! Low-rank plus sparse separation `Z = A + E`.
//!
//! All solvers target `min ||A||_* + lambda ||E||_1  s.t.  Z = A + E` and share
//! one stopping rule: the relative residual `||Z - A - E||_F / ||Z||_F`
//! must fall to `tol` within `max_iter` iterations.

use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::time::Instant;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::{linalg, Error, Result};

#[derive(Debug, Clone)]
pub struct RpcaProblem {
    pub z: DMatrix<f64>,
    pub lambda: f64,
    pub tol: f64,
    pub max_iter: usize,
}

impl RpcaProblem {
    /// Defaults: `lambda = 1/sqrt(max(t, m))`, `tol = 1e-7`, 3000 iterations.
    pub fn new(z: DMatrix<f64>) -> Self {
        let lambda = 1.0 / (z.nrows().max(z.ncols()).max(1) as f64).sqrt();
        RpcaProblem { z, lambda, tol: 1e-7, max_iter: 3000 }
    }

    /// Problem with the solver's customary tolerance.
    pub fn for_solver(z: DMatrix<f64>, solver: Solver) -> Self {
        RpcaProblem { tol: solver.default_tol(), ..Self::new(z) }
    }

    pub fn with_lambda(mut self, lambda: f64) -> Self {
        self.lambda = lambda;
        self
    }

    pub fn with_tol(mut self, tol: f64) -> Self {
        self.tol = tol;
        self
    }

    pub fn with_max_iter(mut self, max_iter: usize) -> Self {
        self.max_iter = max_iter;
        self
    }

    fn validate(&self) -> Result<()> {
        if self.z.is_empty() {
            return Err(Error::contract("RPCA input is empty"));
        }
        if self.z.iter().any(|v| !v.is_finite()) {
            return Err(Error::contract("RPCA input has non-finite entries"));
        }
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(Error::contract(format!("lambda = {} must be positive", self.lambda)));
        }
        if self.tol.is_nan() || self.tol <= 0.0 {
            return Err(Error::contract(format!("tol = {} must be positive", self.tol)));
        }
        if self.max_iter == 0 {
            return Err(Error::contract("max_iter must be at least 1"));
        }
        Ok(())
    }

    pub fn relative_error(&self, a: &DMatrix<f64>, e: &DMatrix<f64>) -> f64 {
        relative_error(&self.z, a, e)
    }

    pub fn objective(&self, a: &DMatrix<f64>, e: &DMatrix<f64>) -> Result<f64> {
        Ok(linalg::singular_values(a)?.sum() + self.lambda * linalg::l1_norm(e))
    }
}

/// `||Z - A - E||_F / ||Z||_F`.
pub fn relative_error(z: &DMatrix<f64>, a: &DMatrix<f64>, e: &DMatrix<f64>) -> f64 {
    let zn = z.norm();
    if zn == 0.0 {
        return (a + e).norm();
    }
    (z - a - e).norm() / zn
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub iteration: usize,
    pub rel_error: f64,
    pub rank: usize,
    /// Entries of `E` with magnitude above `1e-12 * max|Z|`.
    pub support: usize,
}

#[derive(Debug, Clone)]
pub struct Decomposition {
    pub a: DMatrix<f64>,
    pub e: DMatrix<f64>,
    pub iterations: usize,
    pub trace: Vec<TraceEntry>,
    pub converged: bool,
    /// Seconds spent inside the solver.
    pub wall_time: f64,
    pub solver: Solver,
}

impl Decomposition {
    pub fn rel_error(&self) -> f64 {
        self.trace.last().map_or(f64::NAN, |t| t.rel_error)
    }

    pub fn write_trace_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["iteration", "rel_error", "rank", "support"])?;
        for t in &self.trace {
            w.write_record(&[
                t.iteration.to_string(),
                format!("{:e}", t.rel_error),
                t.rank.to_string(),
                t.support.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Solver {
    Alm,
    Apg,
    Svt,
    Dual,
}

impl Solver {
    pub const ALL: [Solver; 4] = [Solver::Alm, Solver::Apg, Solver::Svt, Solver::Dual];

    pub fn name(self) -> &'static str {
        match self {
            Solver::Alm => "alm",
            Solver::Apg => "apg",
            Solver::Svt => "svt",
            Solver::Dual => "dual",
        }
    }

    /// Tolerance each method is normally run at.
    pub fn default_tol(self) -> f64 {
        match self {
            Solver::Alm | Solver::Apg => 1e-7,
            Solver::Svt => 1e-4,
            Solver::Dual => 2e-5,
        }
    }

    pub fn solve(self, problem: &RpcaProblem) -> Result<Decomposition> {
        match self {
            Solver::Alm => solve_alm(problem),
            Solver::Apg => solve_apg(problem),
            Solver::Svt => solve_svt(problem),
            Solver::Dual => solve_dual(problem),
        }
    }
}

impl fmt::Display for Solver {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Solver {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "alm" => Ok(Solver::Alm),
            "apg" => Ok(Solver::Apg),
            "svt" => Ok(Solver::Svt),
            "dual" => Ok(Solver::Dual),
            other => Err(Error::Config(format!("unknown solver '{other}'"))),
        }
    }
}

pub fn soft_threshold(x: f64, eps: f64) -> f64 {
    if x > eps {
        x - eps
    } else if x < -eps {
        x + eps
    } else {
        0.0
    }
}

pub fn soft_threshold_matrix(m: &DMatrix<f64>, eps: f64) -> DMatrix<f64> {
    m.map(|x| soft_threshold(x, eps))
}

/// Singular value shrinkage `U soft(S, eps) V^T`, plus the rank kept.
pub fn singular_value_shrink(m: &DMatrix<f64>, eps: f64) -> Result<(DMatrix<f64>, usize)> {
    Shrinker::default().shrink(m, eps)
}

/// Thresholds at or above this fraction of `||M||_2` take the Gram-matrix
/// path, whose error there is ~`eps_mach / GRAM_RATIO` relative to `||M||_2`.
const GRAM_RATIO: f64 = 1e-6;

/// Shrinkage that remembers the last spectral norm so a full SVD is only
/// paid for when the threshold is small relative to it.
#[derive(Default)]
struct Shrinker {
    smax: Option<f64>,
}

impl Shrinker {
    fn shrink(&mut self, m: &DMatrix<f64>, eps: f64) -> Result<(DMatrix<f64>, usize)> {
        if eps < 0.0 {
            return Err(Error::contract("shrinkage threshold must be non-negative"));
        }
        // ||M||_2 <= ||M||_F, so nothing survives below this.
        if m.norm() <= eps {
            return Ok((DMatrix::zeros(m.nrows(), m.ncols()), 0));
        }
        let try_gram = eps > 0.0 && self.smax.is_none_or(|s| eps >= 2.0 * GRAM_RATIO * s);
        if try_gram {
            let (svd, smax) = linalg::leading_svd(m, eps)?;
            self.smax = Some(smax);
            if eps >= GRAM_RATIO * smax {
                return Ok(compose_shrunk(&svd, eps, m.shape()));
            }
        }
        let svd = linalg::thin_svd(m)?;
        self.smax = svd.s.get(0).copied();
        Ok(compose_shrunk(&svd, eps, m.shape()))
    }
}

fn compose_shrunk(svd: &linalg::Svd, eps: f64, shape: (usize, usize)) -> (DMatrix<f64>, usize) {
    let r = svd.s.iter().take_while(|s| **s > eps).count();
    if r == 0 {
        return (DMatrix::zeros(shape.0, shape.1), 0);
    }
    let mut us = svd.u.columns(0, r).into_owned();
    for j in 0..r {
        us.column_mut(j).scale_mut(svd.s[j] - eps);
    }
    (us * svd.v.columns(0, r).transpose(), r)
}

/// Shared bookkeeping: timing, trace and the stopping rule.
struct Run<'a> {
    problem: &'a RpcaProblem,
    z_norm: f64,
    support_floor: f64,
    trace: Vec<TraceEntry>,
    start: Instant,
    solver: Solver,
}

impl<'a> Run<'a> {
    fn start(problem: &'a RpcaProblem, solver: Solver) -> Result<Self> {
        problem.validate()?;
        Ok(Run {
            problem,
            z_norm: problem.z.norm(),
            support_floor: 1e-12 * linalg::max_abs(&problem.z),
            trace: Vec::new(),
            start: Instant::now(),
            solver,
        })
    }

    fn trivial(&self) -> Option<Decomposition> {
        (self.z_norm == 0.0).then(|| {
            let (t, m) = self.problem.z.shape();
            Decomposition {
                a: DMatrix::zeros(t, m),
                e: DMatrix::zeros(t, m),
                iterations: 0,
                trace: vec![TraceEntry { iteration: 0, rel_error: 0.0, rank: 0, support: 0 }],
                converged: true,
                wall_time: self.start.elapsed().as_secs_f64(),
                solver: self.solver,
            }
        })
    }

    /// Record iteration `k` and report whether the tolerance is met.
    fn record(&mut self, k: usize, residual: &DMatrix<f64>, rank: usize, e: &DMatrix<f64>) -> bool {
        let rel_error = residual.norm() / self.z_norm;
        let support = e.iter().filter(|v| v.abs() > self.support_floor).count();
        self.trace.push(TraceEntry { iteration: k, rel_error, rank, support });
        rel_error <= self.problem.tol
    }

    fn finish(self, a: DMatrix<f64>, e: DMatrix<f64>, converged: bool) -> Decomposition {
        Decomposition {
            a,
            e,
            iterations: self.trace.len(),
            trace: self.trace,
            converged,
            wall_time: self.start.elapsed().as_secs_f64(),
            solver: self.solver,
        }
    }
}

/// Inexact augmented Lagrange multiplier method.
pub fn solve_alm(problem: &RpcaProblem) -> Result<Decomposition> {
    let mut run = Run::start(problem, Solver::Alm)?;
    if let Some(d) = run.trivial() {
        return Ok(d);
    }
    let z = &problem.z;
    let lambda = problem.lambda;
    let norm_two = linalg::spectral_norm(z)?;
    let dual_norm = norm_two.max(linalg::max_abs(z) / lambda);
    let mut gamma = z / dual_norm;
    let mut mu = 1.25 / norm_two;
    let omega = 1.5;

    let (t, m) = z.shape();
    let mut a = DMatrix::zeros(t, m);
    let mut e = DMatrix::zeros(t, m);
    let mut shrinker = Shrinker::default();
    for k in 1..=problem.max_iter {
        let inv_mu = 1.0 / mu;
        let (a_next, rank) = shrinker.shrink(&(z - &e + &gamma * inv_mu), inv_mu)?;
        a = a_next;
        e = soft_threshold_matrix(&(z - &a + &gamma * inv_mu), lambda * inv_mu);
        let residual = z - &a - &e;
        gamma += &residual * mu;
        mu *= omega;
        if run.record(k, &residual, rank, &e) {
            return Ok(run.finish(a, e, true));
        }
    }
    Ok(run.finish(a, e, false))
}

/// Accelerated proximal gradient with continuation on the penalty weight.
///
/// Solves `min mu ||A||_* + mu lambda ||E||_1 + 1/2 ||Z - A - E||_F^2` while
/// `mu` decays geometrically from `0.99 ||Z||_2` to `1e-9` of that.
pub fn solve_apg(problem: &RpcaProblem) -> Result<Decomposition> {
    let mut run = Run::start(problem, Solver::Apg)?;
    if let Some(d) = run.trivial() {
        return Ok(d);
    }
    let z = &problem.z;
    let lambda = problem.lambda;
    let mut mu = 0.99 * linalg::spectral_norm(z)?;
    let mu_floor = 1e-9 * mu;
    let eta = 0.9;

    let (t, m) = z.shape();
    let mut a = DMatrix::zeros(t, m);
    let mut e = DMatrix::zeros(t, m);
    let mut a_prev = a.clone();
    let mut e_prev = e.clone();
    let (mut tk, mut tk_prev) = (1.0_f64, 1.0_f64);
    let mut shrinker = Shrinker::default();
    for k in 1..=problem.max_iter {
        let w = (tk_prev - 1.0) / tk;
        let ya = &a + (&a - &a_prev) * w;
        let ye = &e + (&e - &e_prev) * w;
        // Gradient of the smooth term is the same for both blocks; the
        // Lipschitz constant of the joint gradient is 2.
        let half_grad = (&ya + &ye - z) * 0.5;
        let (a_next, rank) = shrinker.shrink(&(&ya - &half_grad), mu / 2.0)?;
        let e_next = soft_threshold_matrix(&(&ye - &half_grad), lambda * mu / 2.0);
        a_prev = std::mem::replace(&mut a, a_next);
        e_prev = std::mem::replace(&mut e, e_next);

        tk_prev = tk;
        tk = (1.0 + (4.0 * tk * tk + 1.0).sqrt()) / 2.0;
        mu = (eta * mu).max(mu_floor);

        let residual = z - &a - &e;
        if run.record(k, &residual, rank, &e) {
            return Ok(run.finish(a, e, true));
        }
    }
    Ok(run.finish(a, e, false))
}

/// Singular value thresholding: linearized Bregman iteration on the dual
/// variable `Y` with threshold `tau = 1e4` and step `0.9`.
pub fn solve_svt(problem: &RpcaProblem) -> Result<Decomposition> {
    let mut run = Run::start(problem, Solver::Svt)?;
    if let Some(d) = run.trivial() {
        return Ok(d);
    }
    let z = &problem.z;
    let tau = 1e4;
    let delta = 0.9;
    let (t, m) = z.shape();
    let mut y = DMatrix::zeros(t, m);
    let mut a = DMatrix::zeros(t, m);
    let mut e = DMatrix::zeros(t, m);
    let mut shrinker = Shrinker::default();
    for k in 1..=problem.max_iter {
        let (a_next, rank) = shrinker.shrink(&y, tau)?;
        a = a_next;
        e = soft_threshold_matrix(&y, problem.lambda * tau);
        let residual = z - &a - &e;
        y += &residual * delta;
        if run.record(k, &residual, rank, &e) {
            return Ok(run.finish(a, e, true));
        }
    }
    Ok(run.finish(a, e, false))
}

/// Knobs of the dual method.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DualSettings {
    /// Relative slack for treating a constraint of the dual ball as active.
    pub active_slack: f64,
    /// Alternating-projection sweeps when both constraints are active.
    pub max_inner: usize,
}

impl Default for DualSettings {
    fn default() -> Self {
        DualSettings { active_slack: 5e-2, max_inner: 10 }
    }
}

struct DualPoint {
    y: DMatrix<f64>,
    svd: linalg::Svd,
    norm_two: f64,
    norm_inf: f64,
}

impl DualPoint {
    /// Only singular triplets within `slack` of the ball's edge are kept.
    fn new(y: DMatrix<f64>, lambda: f64, slack: f64) -> Result<Self> {
        let norm_inf = linalg::max_abs(&y) / lambda;
        let (svd, norm_two) = linalg::leading_svd(&y, (1.0 - slack) * norm_inf)?;
        Ok(DualPoint { y, svd, norm_two, norm_inf })
    }

    fn scale(&self) -> f64 {
        self.norm_two.max(self.norm_inf)
    }
}

fn dual_scale(y: &DMatrix<f64>, lambda: f64) -> Result<f64> {
    Ok(linalg::spectral_norm_gram(y)?.max(linalg::max_abs(y) / lambda))
}

/// Projection onto the normal cone of the spectral-norm ball at a point whose
/// top singular vectors are `u1`, `v1`.
fn project_spectral_cone(x: &DMatrix<f64>, u1: &DMatrix<f64>, v1: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let w = u1.tr_mul(x) * v1;
    let w = (&w + w.transpose()) * 0.5;
    let (vals, vecs) = linalg::symmetric_eigen_desc(&w)?;
    let mut psd = DMatrix::zeros(w.nrows(), w.ncols());
    for (j, v) in vals.iter().enumerate() {
        if *v > 0.0 {
            let q = vecs.column(j);
            psd += q * q.transpose() * *v;
        }
    }
    Ok(u1 * psd * v1.transpose())
}

/// Projection onto the normal cone of the scaled l-infinity ball.
fn project_box_cone(x: &DMatrix<f64>, y: &DMatrix<f64>, edge: f64) -> DMatrix<f64> {
    x.zip_map(y, |xv, yv| {
        if yv >= edge {
            xv.max(0.0)
        } else if yv <= -edge {
            xv.min(0.0)
        } else {
            0.0
        }
    })
}

/// Dual projected ascent: maximize `<Z, Y>` over
/// `max(||Y||_2, ||Y||_inf / lambda) <= 1`. The primal pair is the projection
/// of `Z` onto the normal cone at `Y`, split into its spectral and box parts.
pub fn solve_dual(problem: &RpcaProblem) -> Result<Decomposition> {
    solve_dual_with(problem, &DualSettings::default())
}

pub fn solve_dual_with(problem: &RpcaProblem, settings: &DualSettings) -> Result<Decomposition> {
    let slack = settings.active_slack;
    let mut run = Run::start(problem, Solver::Dual)?;
    if let Some(d) = run.trivial() {
        return Ok(d);
    }
    let z = &problem.z;
    let lambda = problem.lambda;
    let (t, m) = z.shape();

    let y0 = z.map(f64::signum);
    let s0 = dual_scale(&y0, lambda)?;
    let mut point = DualPoint::new(y0 / s0, lambda, slack)?;
    let mut step = 1.0 / point.norm_two.max(1.0);
    let mut a = DMatrix::zeros(t, m);
    let mut e = DMatrix::zeros(t, m);

    for k in 1..=problem.max_iter {
        let scale = point.scale();
        let spectral_active = point.norm_two >= (1.0 - slack) * scale;
        let box_active = point.norm_inf >= (1.0 - slack) * scale;

        let r1 = point.svd.s.iter().take_while(|s| **s >= (1.0 - slack) * scale).count();
        let u1 = point.svd.u.columns(0, r1.max(1).min(point.svd.s.len())).into_owned();
        let v1 = point.svd.v.columns(0, r1.max(1).min(point.svd.s.len())).into_owned();
        let edge = (1.0 - slack) * scale * lambda;

        a.fill(0.0);
        e.fill(0.0);
        match (spectral_active, box_active) {
            (true, false) => a = project_spectral_cone(z, &u1, &v1)?,
            (false, true) => e = project_box_cone(z, &point.y, edge),
            _ => {
                // Projection onto the sum of the two cones by alternation.
                for _ in 0..settings.max_inner {
                    let a_new = project_spectral_cone(&(z - &e), &u1, &v1)?;
                    let e_new = project_box_cone(&(z - &a_new), &point.y, edge);
                    let change = (&a_new - &a).norm() + (&e_new - &e).norm();
                    a = a_new;
                    e = e_new;
                    if change <= 1e-3 * problem.tol * run.z_norm {
                        break;
                    }
                }
            }
        }
        let direction = z - &a - &e;
        if run.record(k, &direction, r1, &e) {
            return Ok(run.finish(a, e, true));
        }

        // Backtracking / expanding search on the normalized objective.
        let current = z.dot(&point.y) / scale;
        let objective = |s: f64| -> Result<(f64, DMatrix<f64>)> {
            let cand = &point.y + &direction * s;
            let sc = dual_scale(&cand, lambda)?;
            Ok((z.dot(&cand) / sc, cand / sc))
        };
        let (mut best_val, mut best_y) = objective(step)?;
        if best_val > current {
            loop {
                let (v, y) = objective(step * 2.0)?;
                if v <= best_val {
                    break;
                }
                step *= 2.0;
                best_val = v;
                best_y = y;
            }
        } else {
            let mut tries = 0;
            while best_val <= current && tries < 40 {
                step *= 0.5;
                let (v, y) = objective(step)?;
                best_val = v;
                best_y = y;
                tries += 1;
            }
            if best_val <= current {
                // No ascent left at machine precision.
                return Ok(run.finish(a, e, false));
            }
        }
        point = DualPoint::new(best_y, lambda, slack)?;
    }
    Ok(run.finish(a, e, false))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::seq::index;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn randn(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
        DMatrix::from_fn(r, c, |_, _| StandardNormal.sample(rng))
    }

    /// Rank-`r` matrix plus `density` spikes of magnitude `10 * max|A0|`.
    fn planted(seed: u64, t: usize, m: usize, r: usize, density: f64) -> (DMatrix<f64>, DMatrix<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a0 = randn(&mut rng, t, r) * randn(&mut rng, r, m);
        let peak = linalg::max_abs(&a0);
        let mut e0 = DMatrix::zeros(t, m);
        let count = (density * (t * m) as f64).ceil() as usize;
        for p in index::sample(&mut rng, t * m, count) {
            e0[(p / m, p % m)] = if rng.random_bool(0.5) { 10.0 * peak } else { -10.0 * peak };
        }
        (a0, e0)
    }

    #[test]
    fn soft_threshold_values() {
        assert_relative_eq!(soft_threshold(1.2, 0.5), 0.7, epsilon = 1e-15);
        assert_relative_eq!(soft_threshold(-1.2, 0.5), -0.7, epsilon = 1e-15);
        assert_eq!(soft_threshold(0.3, 0.5), 0.0);
        assert_eq!(soft_threshold(-0.5, 0.5), 0.0);
    }

    #[test]
    fn shrink_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = randn(&mut rng, 8, 5);
        let (same, r) = singular_value_shrink(&m, 0.0).unwrap();
        assert_eq!(r, 5);
        assert_relative_eq!(same, m, epsilon = 1e-10);
        let top = linalg::spectral_norm(&m).unwrap();
        let (zero, r) = singular_value_shrink(&m, top).unwrap();
        assert_eq!(r, 0);
        assert_eq!(zero, DMatrix::zeros(8, 5));

        // sigma = [5, 1] built from orthonormal factors.
        let u = linalg::orthonormal_columns(&randn(&mut rng, 6, 2));
        let v = linalg::orthonormal_columns(&randn(&mut rng, 4, 2));
        let m = &u * DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![5.0, 1.0])) * v.transpose();
        let (out, r) = singular_value_shrink(&m, 2.0).unwrap();
        assert_eq!(r, 1);
        let s = linalg::singular_values(&out).unwrap();
        assert_relative_eq!(s[0], 3.0, epsilon = 1e-12);
        assert!(s[1] < 1e-12);
        assert!(singular_value_shrink(&m, -1.0).is_err());
    }

    #[test]
    fn alm_leaves_low_rank_input_alone() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let z = randn(&mut rng, 60, 3) * randn(&mut rng, 3, 40);
        let d = solve_alm(&RpcaProblem::new(z.clone())).unwrap();
        assert!(d.converged);
        assert!(linalg::l1_norm(&d.e) / linalg::l1_norm(&z) < 1e-6);
        assert!((&d.a - &z).norm() / z.norm() < 1e-6);
    }

    #[test]
    fn alm_recovers_planted_split() {
        let (a0, e0) = planted(3, 200, 100, 5, 0.01);
        let z = &a0 + &e0;
        let p = RpcaProblem::new(z.clone());
        let d = solve_alm(&p).unwrap();
        assert!(d.converged);
        assert!(d.rel_error() <= 1e-7);
        let err = (&d.a - &a0).norm() / a0.norm();
        assert!(err < 1e-6, "relative error of A: {err:e}");
        // Objective no worse than the two trivial splits.
        let obj = p.objective(&d.a, &d.e).unwrap();
        let zero = DMatrix::zeros(200, 100);
        assert!(obj <= p.objective(&z, &zero).unwrap());
        assert!(obj <= p.objective(&zero, &z).unwrap());
        // Trace bookkeeping.
        assert_eq!(d.trace.len(), d.iterations);
        assert_eq!(d.trace.last().unwrap().rank, 5);
    }

    #[test]
    fn apg_recovers_planted_split() {
        let (a0, e0) = planted(4, 200, 100, 5, 0.01);
        let d = solve_apg(&RpcaProblem::new(&a0 + &e0)).unwrap();
        assert!(d.converged);
        let err = (&d.a - &a0).norm() / a0.norm();
        assert!(err < 1e-4, "relative error of A: {err:e}");
    }

    #[test]
    fn baselines_are_less_accurate_than_alm() {
        let (a0, e0) = planted(5, 120, 60, 4, 0.01);
        let z = &a0 + &e0;
        let alm = solve_alm(&RpcaProblem::for_solver(z.clone(), Solver::Alm)).unwrap();
        for s in [Solver::Svt, Solver::Dual] {
            let d = s.solve(&RpcaProblem::for_solver(z.clone(), s)).unwrap();
            assert!(d.rel_error() > alm.rel_error(), "{s}: {:e} vs {:e}", d.rel_error(), alm.rel_error());
            assert!(d.rel_error().is_finite());
        }
    }

    #[test]
    fn svt_heavy_threshold_gives_small_rank() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let z = randn(&mut rng, 40, 20) + randn(&mut rng, 40, 2) * randn(&mut rng, 2, 20) * 5.0;
        let d = solve_svt(&RpcaProblem::new(z).with_max_iter(300)).unwrap();
        assert!(d.trace.last().unwrap().rank <= 3);
    }

    #[test]
    fn zero_input_is_trivial_for_every_solver() {
        for s in Solver::ALL {
            let d = s.solve(&RpcaProblem::new(DMatrix::zeros(5, 4))).unwrap();
            assert!(d.converged);
            assert_eq!(d.a, DMatrix::zeros(5, 4));
            assert_eq!(d.e, DMatrix::zeros(5, 4));
        }
    }

    #[test]
    fn rejects_bad_problems() {
        let z = DMatrix::from_element(3, 3, 1.0);
        assert!(solve_alm(&RpcaProblem::new(z.clone()).with_lambda(0.0)).is_err());
        assert!(solve_alm(&RpcaProblem::new(z.clone()).with_tol(0.0)).is_err());
        assert!(solve_alm(&RpcaProblem::new(z).with_max_iter(0)).is_err());
        assert!(solve_alm(&RpcaProblem::new(DMatrix::zeros(0, 0))).is_err());
        assert!("bogus".parse::<Solver>().is_err());
        assert_eq!("APG".parse::<Solver>().unwrap(), Solver::Apg);
    }

    #[test]
    fn iteration_cap_reports_non_convergence() {
        let (a0, e0) = planted(7, 50, 30, 3, 0.02);
        let d = solve_alm(&RpcaProblem::new(a0 + e0).with_max_iter(3)).unwrap();
        assert!(!d.converged);
        assert_eq!(d.iterations, 3);
    }

    #[test]
    fn runs_are_deterministic() {
        let (a0, e0) = planted(8, 80, 40, 3, 0.05);
        let z = a0 + e0;
        for s in [Solver::Alm, Solver::Apg] {
            let p = RpcaProblem::new(z.clone());
            let x = s.solve(&p).unwrap();
            let y = s.solve(&p).unwrap();
            assert_eq!(x.iterations, y.iterations);
            assert_eq!(x.a, y.a);
            assert_eq!(x.e, y.e);
        }
    }

    #[test]
    fn trace_csv_has_header_and_rows() {
        let (a0, e0) = planted(9, 30, 20, 2, 0.02);
        let d = solve_alm(&RpcaProblem::new(a0 + e0)).unwrap();
        let mut buf = Vec::new();
        d.write_trace_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("iteration,rel_error,rank,support\n"));
        assert_eq!(text.lines().count(), d.iterations + 1);
    }

    #[test]
    fn gram_shrink_matches_full_svd_on_fixture_windows() {
        use crate::casefile::fixtures;
        use crate::dcmodel::build_jacobian;
        use crate::measgen::{corrupt, generate, GenerateSpec, GrossErrorSpec};
        for case in [fixtures::ieee14(), fixtures::ieee30(), fixtures::ieee57()] {
            let jac = build_jacobian(&case).unwrap();
            let x0 = jac.operating_point(&case).unwrap();
            let w = generate(
                &jac,
                &x0,
                &GenerateSpec { t: 500, state: Default::default(), noise: Some(Default::default()) },
                3,
            )
            .unwrap();
            let z = corrupt(&w, &GrossErrorSpec::density(0.01, 4)).unwrap().z;
            let full = linalg::thin_svd(&z).unwrap();
            let top = full.s[0];
            for ratio in [GRAM_RATIO, 1e-4, 1e-2, 0.3] {
                let eps = ratio * top;
                let (fast, r_fast) = Shrinker::default().shrink(&z, eps).unwrap();
                let (slow, r_slow) = compose_shrunk(&full, eps, z.shape());
                assert_eq!(r_fast, r_slow);
                assert!((fast - slow).amax() <= 1e-9 * top, "ratio {ratio}");
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn soft_threshold_shrinks_toward_zero(x in -10.0f64..10.0, eps in 0.0f64..5.0) {
            let y = soft_threshold(x, eps);
            prop_assert!(y.abs() <= x.abs());
            prop_assert!(y == 0.0 || y.signum() == x.signum());
            prop_assert!((x - y).abs() <= eps + 1e-12);
        }

        #[test]
        fn shrink_reduces_each_singular_value(seed in any::<u64>(), eps in 0.0f64..3.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = randn(&mut rng, 7, 5);
            let s = linalg::singular_values(&m).unwrap();
            let (out, _) = singular_value_shrink(&m, eps).unwrap();
            let so = linalg::singular_values(&out).unwrap();
            for k in 0..5 {
                prop_assert!((so[k] - (s[k] - eps).max(0.0)).abs() < 1e-9);
            }
        }
    }
}
