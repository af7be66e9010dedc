//! Levenberg-Marquardt for GMM criteria, with an optional Euclidean-norm
//! penalty `c * ||theta - center||`.
//!
//! Each iteration minimizes the Gauss-Newton model of `gbar' W gbar` plus
//! the exact (non-smoothed) penalty. That model problem has a closed-form
//! solution up to one scalar: either the step lands exactly on the center,
//! or it solves `z = -(H + (c / ||z||) I)^{-1} b`, which is found by
//! bisection on `||z||`. Steps are accepted only if they decrease the true
//! objective, so the iterates are monotone.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::moments::{firm_moments_jacobian, MomentSpec, WeightMatrix};
use crate::panel::LaggedRow;

/// Averaged moments of some estimation problem.
pub trait MomentSystem: Sync {
    fn spec(&self) -> &MomentSpec;

    /// Averaged moments and their Jacobian at `theta`.
    fn eval(&self, theta: &[f64]) -> Result<(DVector<f64>, DMatrix<f64>)>;

    fn moments(&self, theta: &[f64]) -> Result<DVector<f64>> {
        self.eval(theta).map(|(g, _)| g)
    }
}

/// Time-averaged moments of one firm.
pub struct FirmSystem<'a> {
    pub rows: &'a [LaggedRow],
    pub spec: &'a MomentSpec,
}

impl MomentSystem for FirmSystem<'_> {
    fn spec(&self) -> &MomentSpec {
        self.spec
    }

    fn eval(&self, theta: &[f64]) -> Result<(DVector<f64>, DMatrix<f64>)> {
        firm_moments_jacobian(self.rows, theta, self.spec)
    }

    fn moments(&self, theta: &[f64]) -> Result<DVector<f64>> {
        crate::moments::firm_avg_moments(self.rows, theta, self.spec)
    }
}

/// Equal-weight average of firm-averaged moments over a set of firms.
pub struct GroupSystem<'a> {
    pub firms: Vec<&'a [LaggedRow]>,
    pub spec: &'a MomentSpec,
}

impl MomentSystem for GroupSystem<'_> {
    fn spec(&self) -> &MomentSpec {
        self.spec
    }

    fn eval(&self, theta: &[f64]) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let (p, q) = (self.spec.num_params(), self.spec.num_moments());
        let mut g = DVector::zeros(q);
        let mut d = DMatrix::zeros(q, p);
        for rows in &self.firms {
            let (gi, di) = firm_moments_jacobian(rows, theta, self.spec)?;
            g += gi;
            d += di;
        }
        let n = self.firms.len() as f64;
        Ok((g / n, d / n))
    }

    fn moments(&self, theta: &[f64]) -> Result<DVector<f64>> {
        let mut g = DVector::zeros(self.spec.num_moments());
        for rows in &self.firms {
            g += crate::moments::firm_avg_moments(rows, theta, self.spec)?;
        }
        Ok(g / self.firms.len() as f64)
    }
}

/// `weight * ||theta - center||` added to the GMM criterion.
#[derive(Debug, Clone, Copy)]
pub struct Penalty<'a> {
    pub center: &'a [f64],
    pub weight: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolveOptions {
    pub max_iter: usize,
    /// Relative step size below which the iteration stops.
    pub xtol: f64,
    /// Relative objective decrease counted as a stall.
    pub ftol: f64,
    /// Decrease counted as a stall, relative to `1 + f(init)`.
    pub atol: f64,
    /// Consecutive stalled iterations after which the iteration stops.
    pub stall_limit: usize,
    /// Unpenalized steps leave directions with singular value below
    /// `rcond` times the largest one untouched.
    pub rcond: f64,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self {
            max_iter: 500,
            xtol: 1e-11,
            ftol: 1e-14,
            atol: 1e-15,
            stall_limit: 3,
            rcond: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Solution {
    pub theta: DVector<f64>,
    /// Penalized objective at `theta`.
    pub value: f64,
    pub iterations: usize,
    pub converged: bool,
}

fn penalty_value(theta: &DVector<f64>, pen: Option<&Penalty>) -> f64 {
    match pen {
        Some(p) if p.weight > 0.0 => {
            let d: f64 = theta
                .iter()
                .zip(p.center)
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            p.weight * d.sqrt()
        }
        _ => 0.0,
    }
}

/// Penalized objective; `+inf` outside the moment functions' domain.
pub fn objective(
    sys: &dyn MomentSystem,
    w: &WeightMatrix,
    pen: Option<&Penalty>,
    theta: &DVector<f64>,
) -> f64 {
    match sys.moments(theta.as_slice()) {
        Ok(g) => {
            let v = w.quad(&g) + penalty_value(theta, pen);
            if v.is_finite() {
                v
            } else {
                f64::INFINITY
            }
        }
        Err(_) => f64::INFINITY,
    }
}

/// Minimizer of `0.5 z'Hz + b'z + c ||z||` for symmetric positive definite `H`.
pub fn prox_quadratic(h: &DMatrix<f64>, b: &DVector<f64>, c: f64) -> Option<DVector<f64>> {
    let eig = h.clone().symmetric_eigen();
    let beta = eig.eigenvectors.transpose() * b;
    prox_diagonal(&eig.eigenvalues, &beta, c).map(|y| &eig.eigenvectors * y)
}

/// [`prox_quadratic`] in the eigenbasis of `H`: eigenvalues `lam`, linear
/// term `beta`.
fn prox_diagonal(lam: &DVector<f64>, beta: &DVector<f64>, c: f64) -> Option<DVector<f64>> {
    let n = beta.len();
    if lam.iter().any(|&l| !(l > 0.0)) {
        return None;
    }
    if c <= 0.0 {
        return Some(DVector::from_iterator(
            n,
            beta.iter().zip(lam.iter()).map(|(bk, lk)| -bk / lk),
        ));
    }
    if beta.norm() <= c {
        return Some(DVector::zeros(n));
    }
    // ||z(r)|| / r = sqrt(sum beta_k^2 / (r lam_k + c)^2), decreasing in r.
    let ratio = |r: f64| -> f64 {
        beta.iter()
            .zip(lam.iter())
            .map(|(bk, lk)| {
                let den = r * lk + c;
                bk * bk / (den * den)
            })
            .sum::<f64>()
            .sqrt()
    };
    let lam_min = lam.iter().cloned().fold(f64::INFINITY, f64::min);
    let mut lo = 0.0;
    let mut hi = beta.norm() / lam_min;
    if !hi.is_finite() {
        return None;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if ratio(mid) > 1.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let r = 0.5 * (lo + hi);
    Some(DVector::from_iterator(
        n,
        beta.iter()
            .zip(lam.iter())
            .map(|(bk, lk)| -bk / (lk + c / r)),
    ))
}

const GN_BACKTRACKS: usize = 6;
const ACCEL_H: f64 = 0.1;
const ACCEL_RATIO: f64 = 0.75;

/// Levenberg-Marquardt from `init`. Fails only if `init` itself is outside
/// the domain of the moment functions.
///
/// Steps are computed from the singular value decomposition of the
/// weighted Jacobian `L'D` (`W = LL'`) rather than from `D'WD`, so weakly
/// identified directions keep their precision. Each iteration takes the
/// best of a backtracked undamped step and a damped step with geodesic
/// acceleration. Without a penalty, numerically null directions (see
/// [`SolveOptions::rcond`]) keep their starting value, which makes the
/// result the minimum-norm correction of `init`.
pub fn minimize(
    sys: &dyn MomentSystem,
    w: &WeightMatrix,
    pen: Option<&Penalty>,
    init: &DVector<f64>,
    opts: &SolveOptions,
) -> Result<Solution> {
    let p = init.len();
    let lt = w
        .matrix()
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Domain("weighting matrix is not positive definite".into()))?
        .l()
        .transpose();
    let center = pen
        .filter(|pn| pn.weight > 0.0)
        .map(|pn| (DVector::from_column_slice(pn.center), pn.weight));
    let mut x = init.clone();
    let (mut g, mut d) = sys.eval(x.as_slice())?;
    let mut f = w.quad(&g) + penalty_value(&x, pen);
    if !f.is_finite() {
        return Err(Error::Numerical("objective is not finite at the start".into()));
    }
    let gain_floor = opts.atol * (1.0 + f);
    let mut mu = 1e-4;
    let mut converged = false;
    let mut iterations = 0;
    let mut stalls = 0;

    while iterations < opts.max_iter {
        iterations += 1;
        let r = &lt * &g;
        let jac = &lt * &d;
        let svd = jac.clone().svd(true, true);
        let (Some(u), Some(vt)) = (svd.u.as_ref(), svd.v_t.as_ref()) else {
            return Err(Error::Numerical("singular value decomposition failed".into()));
        };
        let v = vt.transpose();
        let sig = &svd.singular_values;
        let rho = u.transpose() * &r;
        // gradient and Gauss-Newton curvature of r'r in the basis V
        let grad = DVector::from_iterator(p, (0..p).map(|k| 2.0 * sig[k] * rho[k]));
        let curv = DVector::from_iterator(p, (0..p).map(|k| 2.0 * sig[k] * sig[k]));
        let scale = curv.max().max(1e-300);
        // numerically unidentified directions are frozen unless penalized
        let frozen: Vec<bool> = (0..p)
            .map(|k| center.is_none() && sig[k] <= opts.rcond * sig[0])
            .collect();
        let curv = DVector::from_iterator(p, (0..p).map(|k| if frozen[k] { f64::INFINITY } else { curv[k] }));
        let grad = DVector::from_iterator(p, (0..p).map(|k| if frozen[k] { 0.0 } else { grad[k] }));
        let model_min = |h: &DVector<f64>| -> Option<DVector<f64>> {
            match &center {
                Some((c, weight)) => {
                    let z0 = vt * (&x - c);
                    let bt = DVector::from_iterator(p, (0..p).map(|k| grad[k] - h[k] * z0[k]));
                    prox_diagonal(h, &bt, *weight).map(|y| c + &v * y)
                }
                None => prox_diagonal(h, &grad, 0.0).map(|dz| &x + &v * dz),
            }
        };

        // Undamped Gauss-Newton candidate, halved until it decreases f.
        // In curved valleys it converges where damped steps crawl.
        let mut gauss_newton: Option<(DVector<f64>, f64)> = None;
        if let Some(target) = model_min(&curv) {
            let dir = &target - &x;
            let mut alpha = 1.0;
            for _ in 0..GN_BACKTRACKS {
                let cand = &x + alpha * &dir;
                let fc = objective(sys, w, pen, &cand);
                if fc < f {
                    gauss_newton = Some((cand, fc));
                    break;
                }
                alpha *= 0.5;
            }
        }

        // Second-order correction along the velocity `x_new - x`, from a
        // finite-difference directional second derivative of the weighted
        // moments. Rejected when it dominates the velocity.
        let accelerate = |h: &DVector<f64>, x_new: &DVector<f64>| -> Option<(DVector<f64>, f64)> {
            let vel = x_new - &x;
            let probe = &x + ACCEL_H * &vel;
            let gp = sys.moments(probe.as_slice()).ok()?;
            let second = (2.0 / ACCEL_H) * ((&lt * gp - &r) / ACCEL_H - &jac * &vel);
            let s2 = u.transpose() * second;
            let a = &v * DVector::from_iterator(p, (0..p).map(|k| -2.0 * sig[k] * s2[k] / h[k]));
            if !(2.0 * a.norm() <= ACCEL_RATIO * vel.norm()) {
                return None;
            }
            let cand = x_new + 0.5 * a;
            let fc = objective(sys, w, pen, &cand);
            fc.is_finite().then_some((cand, fc))
        };

        // damped candidate
        let mut damped: Option<(DVector<f64>, f64)> = None;
        let mut model_at_x = false;
        while mu <= 1e16 {
            let h = curv.map(|c| c + mu * scale);
            let Some(x_new) = model_min(&h) else {
                mu *= 4.0;
                continue;
            };
            let step = (&x_new - &x).norm();
            if step == 0.0 {
                model_at_x = true;
                break;
            }
            let f_new = objective(sys, w, pen, &x_new);
            let accel = accelerate(&h, &x_new);
            let best = match accel {
                Some((xa, fa)) if fa < f_new => (xa, fa),
                _ => (x_new.clone(), f_new),
            };
            if best.1 < f {
                damped = Some(best);
                break;
            }
            if step <= opts.xtol * (1.0 + x.norm()) {
                model_at_x = true;
                break;
            }
            mu *= 4.0;
        }

        let pick = match (gauss_newton, damped) {
            (Some(a), Some(b)) => Some(if a.1 <= b.1 { a } else { b }),
            (a, b) => a.or(b),
        };
        let Some((x_new, f_new)) = pick else {
            // no decrease from either model: at numerical precision
            converged = true;
            break;
        };
        let step = (&x_new - &x).norm();
        // a short step only signals convergence when damping is light
        let small_step = (mu <= 1.0 || model_at_x) && step <= opts.xtol * (1.0 + x.norm());
        if f - f_new <= opts.ftol * f + gain_floor {
            stalls += 1;
        } else {
            stalls = 0;
        }
        x = x_new;
        f = f_new;
        let (gn, dn) = sys.eval(x.as_slice())?;
        g = gn;
        d = dn;
        mu = (mu / 3.0).max(1e-30);
        if small_step || stalls >= opts.stall_limit || f == 0.0 {
            converged = true;
            break;
        }
    }

    Ok(Solution {
        theta: x,
        value: f,
        iterations,
        converged,
    })
}

/// Runs [`minimize`] from every start and keeps the lowest objective.
///
/// Solutions within `1e-9` of the smallest starting objective of the best
/// one count as ties. Among ties a stationary productivity process
/// (`|persistence| < 1`) is preferred, then the best-identified solution,
/// i.e. the one whose weighted Jacobian has the largest smallest singular
/// value, and remaining ties go to the earliest start. Exactly identified
/// systems can have several roots; the spurious ones are explosive or sit
/// next to a loss of identification.
pub fn minimize_multistart(
    sys: &dyn MomentSystem,
    w: &WeightMatrix,
    pen: Option<&Penalty>,
    starts: &[DVector<f64>],
    opts: &SolveOptions,
) -> Result<Solution> {
    let tie = 1e-9
        * starts
            .iter()
            .map(|s| objective(sys, w, pen, s))
            .fold(f64::INFINITY, f64::min);
    let mut sols = Vec::with_capacity(starts.len());
    let mut last_err = None;
    for s in starts {
        match minimize(sys, w, pen, s, opts) {
            Ok(sol) if sol.value.is_finite() => sols.push(sol),
            Ok(_) => {}
            Err(e) => last_err = Some(e),
        }
    }
    let Some(best) = sols.iter().map(|s| s.value).reduce(f64::min) else {
        return Err(last_err.unwrap_or_else(|| Error::Numerical("no starting points".into())));
    };
    let persistence = sys.spec().persistence_index();
    let mut chosen: Option<((bool, f64), Solution)> = None;
    for sol in sols.into_iter().filter(|s| s.value <= best + tie) {
        let stationary = persistence.map_or(true, |k| sol.theta[k].abs() < 1.0);
        let key = (stationary, identification_strength(sys, w, &sol.theta));
        if chosen.as_ref().map_or(true, |(b, _)| key > *b) {
            chosen = Some((key, sol));
        }
    }
    Ok(chosen.expect("at least the best solution is a tie").1)
}

/// Smallest singular value of the weighted moment Jacobian, or `-inf`
/// where it cannot be evaluated.
pub fn identification_strength(sys: &dyn MomentSystem, w: &WeightMatrix, theta: &DVector<f64>) -> f64 {
    let Ok((_, d)) = sys.eval(theta.as_slice()) else {
        return f64::NEG_INFINITY;
    };
    let Some(chol) = w.matrix().clone().cholesky() else {
        return f64::NEG_INFINITY;
    };
    let jac = chol.l().transpose() * d;
    jac.singular_values().min()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn objective_model(h: &DMatrix<f64>, b: &DVector<f64>, c: f64, z: &DVector<f64>) -> f64 {
        0.5 * z.dot(&(h * z)) + b.dot(z) + c * z.norm()
    }

    #[test]
    fn prox_matches_brute_force_in_two_dims() {
        let h = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let b = DVector::from_vec(vec![-1.5, 0.7]);
        let c = 0.4;
        let z = prox_quadratic(&h, &b, c).unwrap();
        let best = objective_model(&h, &b, c, &z);
        let mut grid_best = f64::INFINITY;
        let n = 800;
        for i in 0..=n {
            for j in 0..=n {
                let zz = DVector::from_vec(vec![
                    -2.0 + 4.0 * i as f64 / n as f64,
                    -2.0 + 4.0 * j as f64 / n as f64,
                ]);
                grid_best = grid_best.min(objective_model(&h, &b, c, &zz));
            }
        }
        assert!(best <= grid_best + 1e-12);
        assert!(grid_best - best < 1e-4);
    }

    #[test]
    fn prox_thresholds_to_zero() {
        let h = DMatrix::identity(3, 3);
        let b = DVector::from_vec(vec![0.1, 0.2, 0.0]);
        assert_eq!(prox_quadratic(&h, &b, 0.5).unwrap(), DVector::zeros(3));
    }

    #[test]
    fn prox_isotropic_closed_form() {
        // H = a I: z = -(1 - c/||b||) b / a
        let h = DMatrix::identity(2, 2) * 3.0;
        let b = DVector::from_vec(vec![3.0, 4.0]);
        let z = prox_quadratic(&h, &b, 1.0).unwrap();
        let expect = -(1.0 - 1.0 / 5.0) * &b / 3.0;
        assert!((z - expect).norm() < 1e-12);
    }

    /// `g = A theta - b` with `A` diagonal on the first `p` moments.
    struct Linear {
        spec: MomentSpec,
        diag: Vec<f64>,
        b: Vec<f64>,
    }

    impl MomentSystem for Linear {
        fn spec(&self) -> &MomentSpec {
            &self.spec
        }

        fn eval(&self, theta: &[f64]) -> Result<(DVector<f64>, DMatrix<f64>)> {
            let q = self.spec.num_moments();
            let mut g = DVector::zeros(q);
            let mut d = DMatrix::zeros(q, theta.len());
            for k in 0..theta.len() {
                g[k] = self.diag[k] * theta[k] - self.b[k];
                d[(k, k)] = self.diag[k];
            }
            Ok((g, d))
        }
    }

    #[test]
    fn null_directions_are_frozen_without_penalty() {
        let spec = crate::simulate::sim_spec();
        let sys = Linear {
            diag: vec![1.0, 2.0, 0.5, 1.0, 1e-9],
            b: vec![0.3, -0.2, 0.1, 0.4, 1e-3],
            spec,
        };
        let w = WeightMatrix::identity(sys.spec.num_moments());
        let init = DVector::from_vec(vec![0.0, 0.0, 0.0, 0.0, 0.7]);
        let sol = minimize(&sys, &w, None, &init, &SolveOptions::default()).unwrap();
        let expect = [0.3, -0.1, 0.2, 0.4, 0.7];
        for k in 0..5 {
            assert!((sol.theta[k] - expect[k]).abs() < 1e-10, "{k}: {}", sol.theta[k]);
        }
        // without truncation the null direction runs off to b / 1e-9
        let opts = SolveOptions { rcond: 0.0, ..SolveOptions::default() };
        let sol = minimize(&sys, &w, None, &init, &opts).unwrap();
        assert!(sol.theta[4] > 1e5);
        // a penalty supplies curvature, so nothing is frozen
        let center = [0.0; 5];
        let pen = Penalty { center: &center, weight: 1e-12 };
        let sol = minimize(&sys, &w, Some(&pen), &init, &SolveOptions::default()).unwrap();
        assert!((sol.theta[4] - 0.7).abs() > 1e-3);
    }
}
