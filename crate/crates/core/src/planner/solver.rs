//! Minimum-work push-off sequences under terminal speed and timing
//! equalities.
//!
//! Single shooting over the push-offs of a window, an augmented Lagrangian
//! for the equalities and projected BFGS with backtracking for the bound
//! constrained subproblems. The decision variables are `w = sqrt(2u)`, the
//! quantity the transition map is linear in. Constraint Jacobians come from
//! central differences; trial points outside the dynamics domain have
//! infinite merit.

use crate::walker::{self, DynamicsError};

use super::SolverSettings;

const INITIAL_PENALTY: f64 = 10.0;
const MAX_PENALTY: f64 = 1e12;
const MAX_OUTER: usize = 60;
const ARMIJO: f64 = 1e-4;
const MERIT_NOISE: f64 = 1e-12;
const WOLFE_DECREASE: f64 = 0.1;
const WOLFE_CURVATURE: f64 = 0.9;

/// One window of the minimum-work program.
#[derive(Debug, Clone, Copy)]
pub struct WindowProblem<'a> {
    pub alpha: f64,
    pub initial_speed: f64,
    /// Disturbance of each window step plus the one after the window.
    pub deltas: &'a [f64],
    /// Required sum of step times over the window.
    pub time_target: f64,
    /// Required pre-transition speed after the window, if constrained.
    pub speed_target: Option<f64>,
    pub upper_bound: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WindowSolution {
    pub pushoffs: Vec<f64>,
    pub converged: bool,
    /// Terminal speed error (0 when unconstrained) and timing error.
    pub residuals: [f64; 2],
    /// Projected gradient norm of the Lagrangian at the returned point.
    pub stationarity: f64,
    pub iterations: usize,
}

impl WindowProblem<'_> {
    pub fn len(&self) -> usize {
        self.deltas.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn constraint_count(&self) -> usize {
        if self.speed_target.is_some() {
            2
        } else {
            1
        }
    }

    fn residuals_of(&self, pushoffs: &[f64]) -> Result<[f64; 2], DynamicsError> {
        let (v, t) = walker::simulate(self.alpha, self.initial_speed, self.deltas, pushoffs)?;
        let speed = self.speed_target.map_or(0.0, |target| v - target);
        Ok([speed, t - self.time_target])
    }
}

struct Shooting<'a> {
    problem: &'a WindowProblem<'a>,
    w_max: f64,
    h: f64,
    scratch: Vec<f64>,
}

impl<'a> Shooting<'a> {
    fn new(problem: &'a WindowProblem<'a>, h: f64) -> Self {
        Self {
            problem,
            w_max: (2.0 * problem.upper_bound).sqrt(),
            h,
            scratch: vec![0.0; problem.len()],
        }
    }

    fn constraints(&mut self, w: &[f64]) -> Option<[f64; 2]> {
        for (u, &wi) in self.scratch.iter_mut().zip(w) {
            *u = 0.5 * wi * wi;
        }
        self.problem.residuals_of(&self.scratch).ok()
    }

    /// Columns of the constraint Jacobian, one `[dc0, dc1]` per variable.
    fn jacobian(&mut self, w: &[f64], c: [f64; 2]) -> Option<Vec<[f64; 2]>> {
        let mut x = w.to_vec();
        let mut jac = Vec::with_capacity(w.len());
        for i in 0..w.len() {
            let h = self.h * w[i].abs().max(1.0);
            let up = (w[i] + h <= self.w_max).then(|| {
                x[i] = w[i] + h;
                self.constraints(&x)
            });
            let down = (w[i] - h >= 0.0).then(|| {
                x[i] = w[i] - h;
                self.constraints(&x)
            });
            x[i] = w[i];
            let col = match (up.flatten(), down.flatten()) {
                (Some(a), Some(b)) => [(a[0] - b[0]) / (2.0 * h), (a[1] - b[1]) / (2.0 * h)],
                (Some(a), None) => [(a[0] - c[0]) / h, (a[1] - c[1]) / h],
                (None, Some(b)) => [(c[0] - b[0]) / h, (c[1] - b[1]) / h],
                (None, None) => return None,
            };
            jac.push(col);
        }
        Some(jac)
    }

    fn project(&self, x: f64) -> f64 {
        x.clamp(0.0, self.w_max)
    }
}

fn objective(w: &[f64]) -> f64 {
    w.iter().map(|x| 0.5 * x * x).sum()
}

fn merit(w: &[f64], c: [f64; 2], lambda: [f64; 2], mu: f64) -> f64 {
    objective(w) - lambda[0] * c[0] - lambda[1] * c[1] + 0.5 * mu * (c[0] * c[0] + c[1] * c[1])
}

struct Point {
    w: Vec<f64>,
    c: [f64; 2],
    phi: f64,
    grad: Vec<f64>,
}

fn evaluate(sh: &mut Shooting, w: Vec<f64>, lambda: [f64; 2], mu: f64) -> Option<Point> {
    let c = sh.constraints(&w)?;
    let jac = sh.jacobian(&w, c)?;
    let eff = [lambda[0] - mu * c[0], lambda[1] - mu * c[1]];
    let grad = w
        .iter()
        .zip(&jac)
        .map(|(wi, col)| wi - col[0] * eff[0] - col[1] * eff[1])
        .collect();
    Some(Point {
        phi: merit(&w, c, lambda, mu),
        w,
        c,
        grad,
    })
}

fn projected_gradient_norm(sh: &Shooting, p: &Point) -> f64 {
    p.w.iter()
        .zip(&p.grad)
        .map(|(w, g)| (sh.project(w - g) - w).abs())
        .fold(0.0, f64::max)
}

/// Projected BFGS on the augmented Lagrangian; returns the final point and
/// the number of iterations used.
fn inner_solve(
    sh: &mut Shooting,
    start: Point,
    lambda: [f64; 2],
    mu: f64,
    tol: f64,
    max_iter: usize,
) -> (Point, usize) {
    let n = start.w.len();
    let mut p = start;
    let mut hinv = identity(n);
    let mut iterations = 0;
    while iterations < max_iter {
        if projected_gradient_norm(sh, &p) <= tol {
            break;
        }
        iterations += 1;
        let free: Vec<bool> = (0..n)
            .map(|i| {
                let at_lower = p.w[i] <= 0.0 && p.grad[i] > 0.0;
                let at_upper = p.w[i] >= sh.w_max && p.grad[i] < 0.0;
                !(at_lower || at_upper)
            })
            .collect();
        let mut d = direction(&hinv, &p.grad, &free);
        if dot(&d, &p.grad) >= 0.0 {
            hinv = identity(n);
            d = direction(&hinv, &p.grad, &free);
        }
        let Some(next) = line_search(sh, &p, &d, lambda, mu) else {
            if is_identity(&hinv) {
                break;
            }
            hinv = identity(n);
            continue;
        };
        let s: Vec<f64> = next.w.iter().zip(&p.w).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = next.grad.iter().zip(&p.grad).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 * norm(&s) * norm(&y) {
            if iterations == 1 || is_identity(&hinv) {
                let gamma = sy / dot(&y, &y);
                hinv.iter_mut().flatten().for_each(|x| *x *= gamma);
            }
            bfgs_update(&mut hinv, &s, &y, sy);
        }
        p = next;
    }
    (p, iterations)
}

fn line_search(
    sh: &mut Shooting,
    p: &Point,
    d: &[f64],
    lambda: [f64; 2],
    mu: f64,
) -> Option<Point> {
    let mut t = 1.0;
    for _ in 0..60 {
        let trial: Vec<f64> =
            p.w.iter()
                .zip(d)
                .map(|(w, di)| sh.project(w + t * di))
                .collect();
        let decrease: f64 = p
            .grad
            .iter()
            .zip(trial.iter().zip(&p.w))
            .map(|(g, (a, b))| g * (a - b))
            .sum();
        if decrease < 0.0 {
            if let Some(c) = sh.constraints(&trial) {
                let phi = merit(&trial, c, lambda, mu);
                if phi <= p.phi + ARMIJO * decrease {
                    return evaluate(sh, trial, lambda, mu);
                }
                // Approximate Wolfe: merit differences are at roundoff level,
                // so decide on the slope instead.
                if phi <= p.phi + MERIT_NOISE * p.phi.abs().max(1.0) {
                    if let Some(next) = evaluate(sh, trial, lambda, mu) {
                        let slope: f64 = next
                            .grad
                            .iter()
                            .zip(next.w.iter().zip(&p.w))
                            .map(|(g, (a, b))| g * (a - b))
                            .sum();
                        if slope >= WOLFE_CURVATURE * decrease
                            && slope <= (1.0 - 2.0 * WOLFE_DECREASE) * -decrease
                        {
                            return Some(next);
                        }
                    }
                }
            }
        }
        t *= 0.5;
    }
    None
}

fn direction(hinv: &[Vec<f64>], g: &[f64], free: &[bool]) -> Vec<f64> {
    (0..g.len())
        .map(|i| {
            if !free[i] {
                return 0.0;
            }
            -(0..g.len())
                .filter(|&j| free[j])
                .map(|j| hinv[i][j] * g[j])
                .sum::<f64>()
        })
        .collect()
}

fn bfgs_update(h: &mut [Vec<f64>], s: &[f64], y: &[f64], sy: f64) {
    let n = s.len();
    let hy: Vec<f64> = (0..n).map(|i| dot(&h[i], y)).collect();
    let yhy = dot(y, &hy);
    let rho = 1.0 / sy;
    for i in 0..n {
        for j in 0..n {
            h[i][j] += rho * ((1.0 + rho * yhy) * s[i] * s[j] - hy[i] * s[j] - s[i] * hy[j]);
        }
    }
}

fn identity(n: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
        .collect()
}

fn is_identity(h: &[Vec<f64>]) -> bool {
    h.iter().enumerate().all(|(i, row)| {
        row.iter()
            .enumerate()
            .all(|(j, &x)| x == if i == j { 1.0 } else { 0.0 })
    })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn max_abs(c: [f64; 2]) -> f64 {
    c[0].abs().max(c[1].abs())
}

/// Minimizes total push-off work over the window starting from `initial`.
///
/// Fails only when `initial` itself violates the dynamics domain.
pub fn minimize_work(
    problem: &WindowProblem,
    initial: &[f64],
    settings: &SolverSettings,
) -> Result<WindowSolution, DynamicsError> {
    assert_eq!(initial.len(), problem.len());
    if problem.is_empty() {
        let residuals = problem.residuals_of(&[])?;
        return Ok(WindowSolution {
            pushoffs: Vec::new(),
            converged: max_abs(residuals) <= settings.constraint_tolerance,
            residuals,
            stationarity: 0.0,
            iterations: 0,
        });
    }
    problem.residuals_of(initial)?;
    let mut sh = Shooting::new(problem, settings.gradient_step);
    let w0: Vec<f64> = initial
        .iter()
        .map(|u| sh.project((2.0 * u).sqrt()))
        .collect();
    let mut lambda = [0.0; 2];
    let mut mu = INITIAL_PENALTY;
    let mut point = match evaluate(&mut sh, w0, lambda, mu) {
        Some(p) => p,
        None => {
            let err = problem.residuals_of(initial).err();
            return Err(err.unwrap_or(DynamicsError::NonFinite));
        }
    };
    let mut iterations = 0;
    let mut previous = max_abs(point.c);
    let mut best: Option<(f64, f64, Point)> = None;
    for _ in 0..MAX_OUTER {
        let (p, used) = inner_solve(
            &mut sh,
            point,
            lambda,
            mu,
            settings.optimality_tolerance,
            settings.max_iterations,
        );
        iterations += used;
        let violation = max_abs(p.c);
        let stationarity = projected_gradient_norm(&sh, &p);
        let score = (violation / settings.constraint_tolerance)
            .max(stationarity / settings.optimality_tolerance);
        let done = violation <= settings.constraint_tolerance
            && stationarity <= settings.optimality_tolerance;
        lambda = [lambda[0] - mu * p.c[0], lambda[1] - mu * p.c[1]];
        if problem.constraint_count() == 1 {
            lambda[0] = 0.0;
        }
        if violation > settings.constraint_tolerance
            && violation > 0.25 * previous
            && mu < MAX_PENALTY
        {
            mu *= 10.0;
        }
        previous = violation;
        let w = p.w.clone();
        if best.as_ref().is_none_or(|(s, _, _)| score < *s) {
            best = Some((score, stationarity, p));
        }
        if done {
            break;
        }
        match evaluate(&mut sh, w, lambda, mu) {
            Some(next) => point = next,
            None => break,
        }
    }
    let (_, stationarity, point) = best.expect("at least one outer iteration");
    let pushoffs: Vec<f64> = point.w.iter().map(|w| 0.5 * w * w).collect();
    let residuals = problem.residuals_of(&pushoffs)?;
    Ok(WindowSolution {
        converged: max_abs(residuals) <= settings.constraint_tolerance
            && stationarity <= settings.optimality_tolerance,
        pushoffs,
        residuals,
        stationarity,
        iterations,
    })
}
