//! Gaussian mean-shift importance sampling.
//!
//! For a batch `X_1..X_n ~ N(theta_p, I)` with survivor flags `s_j`, the
//! second moment of the shifted estimator is estimated by
//!
//! ```text
//! v_n(theta) = (1/n) sum_j s_j exp(-(theta + theta_p).X_j + (|theta|^2 + |theta_p|^2)/2)
//! ```
//!
//! and the shift is found by minimizing `u = log v_n`, whose Hessian
//! `I + Cov_w(X)` is bounded below by the identity.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vector::{check_dim, dot, norm_sq, Point, ShiftVector};

/// Points drawn under `theta_prev`, their oriented responses and survivor flags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightedBatch {
    pub points: Vec<Point>,
    pub responses: Vec<f64>,
    pub survivors: Vec<bool>,
    pub theta_prev: ShiftVector,
}

impl WeightedBatch {
    /// Flags survivors as `response >= gamma`.
    pub fn new(
        points: Vec<Point>,
        responses: Vec<f64>,
        theta_prev: ShiftVector,
        gamma: f64,
    ) -> Result<Self> {
        let survivors = responses.iter().map(|&r| r >= gamma).collect();
        Self::with_flags(points, responses, survivors, theta_prev)
    }

    pub fn with_flags(
        points: Vec<Point>,
        responses: Vec<f64>,
        survivors: Vec<bool>,
        theta_prev: ShiftVector,
    ) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::domain("empty batch"));
        }
        if responses.len() != points.len() || survivors.len() != points.len() {
            return Err(Error::domain("batch sequences differ in length"));
        }
        let d = theta_prev.dim();
        for p in &points {
            check_dim(d, p.dim())?;
        }
        Ok(WeightedBatch {
            points,
            responses,
            survivors,
            theta_prev,
        })
    }

    /// A batch in which every point survives (`phi = 1`).
    pub fn all_survivors(points: Vec<Point>, theta_prev: ShiftVector) -> Result<Self> {
        let n = points.len();
        Self::with_flags(points, vec![0.0; n], vec![true; n], theta_prev)
    }

    pub fn relevel(&mut self, gamma: f64) {
        for (s, &r) in self.survivors.iter_mut().zip(&self.responses) {
            *s = r >= gamma;
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.theta_prev.dim()
    }

    pub fn survivor_count(&self) -> usize {
        self.survivors.iter().filter(|&&s| s).count()
    }
}

/// Density ratio `f(x; theta_from) / f(x; theta_to)` of `N(theta, I)` laws.
pub fn likelihood_ratio(x: &Point, theta_from: &ShiftVector, theta_to: &ShiftVector) -> Result<f64> {
    check_dim(x.dim(), theta_from.dim())?;
    check_dim(x.dim(), theta_to.dim())?;
    let lin: f64 = x
        .0
        .iter()
        .zip(theta_from.0.iter().zip(&theta_to.0))
        .map(|(xi, (f, t))| (f - t) * xi)
        .sum();
    Ok((lin + 0.5 * (theta_to.norm_sq() - theta_from.norm_sq())).exp())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NewtonSettings {
    pub tol: f64,
    pub max_iter: usize,
    pub cg_rel_tol: f64,
    pub armijo: f64,
    pub backtrack: f64,
}

impl Default for NewtonSettings {
    fn default() -> Self {
        NewtonSettings {
            tol: 1e-8,
            max_iter: 50,
            cg_rel_tol: 1e-10,
            armijo: 1e-4,
            backtrack: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftSolution {
    pub theta_star: ShiftVector,
    pub v_at_theta: f64,
    pub gamma_n_sq: f64,
    pub newton_iterations: usize,
    pub converged: bool,
    pub grad_norm: f64,
}

/// `u(t) = |t|^2/2 + log((1/n) sum_j exp(c_j - t.y_j))` over the survivors, in
/// optimization coordinates `y` (all of `X`, or a coordinate subset).
pub(crate) struct ShiftObjective {
    y: Vec<f64>,
    c: Vec<f64>,
    k: usize,
    ln_n: f64,
}

struct Eval {
    u: f64,
    grad: Vec<f64>,
    w: Vec<f64>,
    mean: Vec<f64>,
}

impl ShiftObjective {
    pub(crate) fn new(batch: &WeightedBatch, coords: Option<&[usize]>) -> Result<Self> {
        let tp = batch.theta_prev.as_slice();
        let half_tp = 0.5 * norm_sq(tp);
        let k = coords.map_or(batch.dim(), <[usize]>::len);
        let mut y = Vec::new();
        let mut c = Vec::new();
        for (p, _) in batch.points.iter().zip(&batch.survivors).filter(|(_, &s)| s) {
            let x = p.as_slice();
            match coords {
                Some(idx) => y.extend(idx.iter().map(|&i| x[i])),
                None => y.extend_from_slice(x),
            }
            c.push(half_tp - dot(tp, x));
        }
        if c.is_empty() {
            return Err(Error::NoSurvivors);
        }
        Ok(ShiftObjective {
            y,
            c,
            k,
            ln_n: (batch.len() as f64).ln(),
        })
    }

    fn row(&self, j: usize) -> &[f64] {
        &self.y[j * self.k..(j + 1) * self.k]
    }

    fn exponents(&self, t: &[f64]) -> Vec<f64> {
        (0..self.c.len()).map(|j| self.c[j] - dot(t, self.row(j))).collect()
    }

    fn value(&self, t: &[f64]) -> f64 {
        let e = self.exponents(t);
        let m = e.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let s: f64 = e.iter().map(|x| (x - m).exp()).sum();
        0.5 * norm_sq(t) + m + s.ln() - self.ln_n
    }

    fn eval(&self, t: &[f64]) -> Eval {
        let e = self.exponents(t);
        let m = e.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut w: Vec<f64> = e.iter().map(|x| (x - m).exp()).collect();
        let s: f64 = w.iter().sum();
        w.iter_mut().for_each(|x| *x /= s);
        let mut mean = vec![0.0; self.k];
        for (j, &wj) in w.iter().enumerate() {
            for (mi, yi) in mean.iter_mut().zip(self.row(j)) {
                *mi += wj * yi;
            }
        }
        let grad = t.iter().zip(&mean).map(|(a, b)| a - b).collect();
        Eval {
            u: 0.5 * norm_sq(t) + m + s.ln() - self.ln_n,
            grad,
            w,
            mean,
        }
    }

    /// `(I + Cov_w(Y)) d`, without forming the matrix.
    fn hess_apply(&self, ev: &Eval, d: &[f64]) -> Vec<f64> {
        let md = dot(&ev.mean, d);
        let mut out = d.to_vec();
        for (j, &wj) in ev.w.iter().enumerate() {
            let r = self.row(j);
            let a = wj * (dot(r, d) - md);
            for (o, (yi, mi)) in out.iter_mut().zip(r.iter().zip(&ev.mean)) {
                *o += a * (yi - mi);
            }
        }
        out
    }

    fn hess_dense(&self, ev: &Eval) -> Vec<Vec<f64>> {
        let mut h = vec![vec![0.0; self.k]; self.k];
        for (a, row) in h.iter_mut().enumerate() {
            row[a] = 1.0;
        }
        for (j, &wj) in ev.w.iter().enumerate() {
            let r = self.row(j);
            for a in 0..self.k {
                let da = r[a] - ev.mean[a];
                for b in 0..self.k {
                    h[a][b] += wj * da * (r[b] - ev.mean[b]);
                }
            }
        }
        h
    }

    /// Empirical variance of the terms whose mean is `v_n(t)`.
    fn term_variance(&self, t: &[f64]) -> f64 {
        let e = self.exponents(t);
        let n = self.ln_n.exp();
        let m = e.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let (s1, s2) = e.iter().fold((0.0, 0.0), |(a, b), x| {
            let r = (x - m).exp();
            (a + r, b + r * r)
        });
        let scale = (2.0 * (m + 0.5 * norm_sq(t))).exp();
        let var = s2 / n - (s1 / n).powi(2);
        (scale * var).max(0.0)
    }

    fn cg(&self, ev: &Eval, rhs: &[f64], rel_tol: f64) -> Vec<f64> {
        let mut x = vec![0.0; self.k];
        let mut r = rhs.to_vec();
        let mut p = r.clone();
        let mut rr = norm_sq(&r);
        let stop = rel_tol * rel_tol * rr;
        for _ in 0..self.k.max(1) {
            if rr <= stop {
                break;
            }
            let hp = self.hess_apply(ev, &p);
            let alpha = rr / dot(&p, &hp);
            for i in 0..self.k {
                x[i] += alpha * p[i];
                r[i] -= alpha * hp[i];
            }
            let rr_new = norm_sq(&r);
            let beta = rr_new / rr;
            rr = rr_new;
            for i in 0..self.k {
                p[i] = r[i] + beta * p[i];
            }
        }
        x
    }

    /// Damped Newton from `init`; never returns an iterate worse than the best seen.
    pub(crate) fn minimize(&self, init: &[f64], s: &NewtonSettings) -> (Vec<f64>, f64, usize, bool) {
        let mut t = init.to_vec();
        let mut ev = self.eval(&t);
        let mut gnorm = norm_sq(&ev.grad).sqrt();
        let mut iters = 0;
        while gnorm > s.tol && iters < s.max_iter {
            iters += 1;
            let neg: Vec<f64> = ev.grad.iter().map(|g| -g).collect();
            let step = self.cg(&ev, &neg, s.cg_rel_tol);
            let slope = dot(&ev.grad, &step);
            // rounding allowance so that steps near the optimum are not rejected as non-decreasing
            let slack = 8.0 * f64::EPSILON * ev.u.abs().max(1.0);
            let mut alpha = 1.0;
            let mut accepted = None;
            for _ in 0..60 {
                let cand: Vec<f64> = t.iter().zip(&step).map(|(a, b)| a + alpha * b).collect();
                let u_new = self.value(&cand);
                if u_new <= ev.u + s.armijo * alpha * slope + slack {
                    accepted = Some(cand);
                    break;
                }
                alpha *= s.backtrack;
            }
            let Some(cand) = accepted else { break };
            let ev_new = self.eval(&cand);
            let g_new = norm_sq(&ev_new.grad).sqrt();
            if ev_new.u > ev.u && g_new >= gnorm {
                break;
            }
            t = cand;
            ev = ev_new;
            gnorm = g_new;
        }
        (t, gnorm, iters, gnorm <= s.tol)
    }
}

fn survivors_or_err(batch: &WeightedBatch, theta: &ShiftVector) -> Result<ShiftObjective> {
    check_dim(batch.dim(), theta.dim())?;
    ShiftObjective::new(batch, None)
}

/// Empirical second moment `v_n(theta)` of the estimator shifted by `theta`.
pub fn v_criterion(theta: &ShiftVector, batch: &WeightedBatch) -> Result<f64> {
    let obj = survivors_or_err(batch, theta)?;
    Ok(obj.value(theta.as_slice()).exp())
}

fn v_terms<'a>(theta: &ShiftVector, batch: &'a WeightedBatch) -> Result<(Vec<(f64, &'a Point)>, f64)> {
    check_dim(batch.dim(), theta.dim())?;
    let tp = batch.theta_prev.as_slice();
    let t = theta.as_slice();
    let base = 0.5 * (norm_sq(t) + norm_sq(tp));
    let terms: Vec<(f64, &Point)> = batch
        .points
        .iter()
        .zip(&batch.survivors)
        .filter(|(_, &s)| s)
        .map(|(p, _)| {
            let x = p.as_slice();
            ((base - dot(t, x) - dot(tp, x)).exp(), p)
        })
        .collect();
    if terms.is_empty() {
        return Err(Error::NoSurvivors);
    }
    Ok((terms, batch.len() as f64))
}

/// `grad v_n(theta) = (1/n) sum_j g_j (theta - X_j)`.
pub fn v_gradient(theta: &ShiftVector, batch: &WeightedBatch) -> Result<Vec<f64>> {
    let (terms, n) = v_terms(theta, batch)?;
    let mut g = vec![0.0; theta.dim()];
    for (gj, p) in terms {
        for (gi, (ti, xi)) in g.iter_mut().zip(theta.0.iter().zip(&p.0)) {
            *gi += gj * (ti - xi) / n;
        }
    }
    Ok(g)
}

/// `hess v_n(theta) = (1/n) sum_j g_j (I + (theta - X_j)(theta - X_j)^T)`.
pub fn v_hessian(theta: &ShiftVector, batch: &WeightedBatch) -> Result<Vec<Vec<f64>>> {
    let (terms, n) = v_terms(theta, batch)?;
    let d = theta.dim();
    let mut h = vec![vec![0.0; d]; d];
    for (gj, p) in terms {
        let diff: Vec<f64> = theta.0.iter().zip(&p.0).map(|(t, x)| t - x).collect();
        for a in 0..d {
            h[a][a] += gj / n;
            for b in 0..d {
                h[a][b] += gj * diff[a] * diff[b] / n;
            }
        }
    }
    Ok(h)
}

#[derive(Debug, Clone, PartialEq)]
pub struct UObjective {
    pub value: f64,
    pub gradient: Vec<f64>,
    pub hessian: Vec<Vec<f64>>,
}

/// `u = log v_n` with its gradient `theta - mean_w(X)` and Hessian `I + Cov_w(X)`.
pub fn u_objective(theta: &ShiftVector, batch: &WeightedBatch) -> Result<UObjective> {
    let obj = survivors_or_err(batch, theta)?;
    let ev = obj.eval(theta.as_slice());
    let hessian = obj.hess_dense(&ev);
    Ok(UObjective {
        value: ev.u,
        gradient: ev.grad,
        hessian,
    })
}

pub(crate) fn solve_on(
    batch: &WeightedBatch,
    coords: Option<&[usize]>,
    theta_init: &ShiftVector,
    settings: &NewtonSettings,
) -> Result<ShiftSolution> {
    check_dim(batch.dim(), theta_init.dim())?;
    let obj = ShiftObjective::new(batch, coords)?;
    let init: Vec<f64> = match coords {
        Some(idx) => idx.iter().map(|&i| theta_init.0[i]).collect(),
        None => theta_init.0.clone(),
    };
    let (t, grad_norm, iters, converged) = obj.minimize(&init, settings);
    let v = obj.value(&t).exp();
    let gamma_n_sq = obj.term_variance(&t);
    let theta = match coords {
        Some(idx) => {
            let mut full = vec![0.0; batch.dim()];
            for (&i, &ti) in idx.iter().zip(&t) {
                full[i] = ti;
            }
            full
        }
        None => t,
    };
    Ok(ShiftSolution {
        theta_star: ShiftVector(theta),
        v_at_theta: v,
        gamma_n_sq,
        newton_iterations: iters,
        converged,
        grad_norm,
    })
}

/// Minimizes `u` by Newton steps with conjugate-gradient inner solves and
/// Armijo backtracking. Fails with `NotConverged` (carrying the best iterate)
/// if `|grad u| > tol` after `max_iter` steps.
pub fn solve_optimal_shift(
    batch: &WeightedBatch,
    theta_init: &ShiftVector,
    tol: f64,
    max_iter: usize,
) -> Result<ShiftSolution> {
    let settings = NewtonSettings {
        tol,
        max_iter,
        ..NewtonSettings::default()
    };
    let sol = solve_on(batch, None, theta_init, &settings)?;
    if !sol.converged {
        return Err(Error::NotConverged {
            max_iter,
            grad_norm: sol.grad_norm,
            best: sol.theta_star,
        });
    }
    Ok(sol)
}
