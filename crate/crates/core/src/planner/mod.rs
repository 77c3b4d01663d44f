//! Push-off planning strategies.
//!
//! Every strategy starts from nominal walking and produces one push-off per
//! step of the padded terrain, then rolls the sequence through the true
//! dynamics.

pub mod solver;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::terrain::{TerrainError, TerrainProfile};
use crate::walker::{self, DynamicsError, GaitTrajectory, ModelParams, RolloutError};

use solver::{minimize_work, WindowProblem};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverSettings {
    pub constraint_tolerance: f64,
    pub optimality_tolerance: f64,
    /// Iteration cap for each bound-constrained subproblem.
    pub max_iterations: usize,
    /// Push-off upper bound as a multiple of the nominal push-off.
    pub pushoff_upper_bound: f64,
    /// Relative finite-difference step.
    pub gradient_step: f64,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self {
            constraint_tolerance: 1e-8,
            optimality_tolerance: 1e-8,
            max_iterations: 500,
            pushoff_upper_bound: 10.0,
            gradient_step: 1e-7,
        }
    }
}

impl SolverSettings {
    pub fn validate(&self) -> Result<(), PlanError> {
        let positive = [
            ("constraint_tolerance", self.constraint_tolerance),
            ("optimality_tolerance", self.optimality_tolerance),
            ("pushoff_upper_bound", self.pushoff_upper_bound),
            ("gradient_step", self.gradient_step),
        ];
        for (name, value) in positive {
            if !(value > 0.0 && value.is_finite()) {
                return Err(PlanError::InvalidSettings(name));
            }
        }
        if self.max_iterations == 0 {
            return Err(PlanError::InvalidSettings("max_iterations"));
        }
        Ok(())
    }
}

/// What the reactive controller knows once unevenness has been contacted.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReactiveMode {
    /// The whole remaining terrain becomes known at first contact.
    #[default]
    FullMap,
    /// Only contacted steps are known; the rest is assumed level.
    Strict,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    Nominal,
    Tight,
    Reactive(ReactiveMode),
    MinEnergy,
    FiniteHorizon { m: usize, terminal_speed: bool },
}

impl Strategy {
    pub fn horizon(m: usize) -> Self {
        Strategy::FiniteHorizon {
            m,
            terminal_speed: true,
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Strategy::Nominal => f.write_str("nominal"),
            Strategy::Tight => f.write_str("tight"),
            Strategy::Reactive(ReactiveMode::FullMap) => f.write_str("reactive"),
            Strategy::Reactive(ReactiveMode::Strict) => f.write_str("reactive-strict"),
            Strategy::MinEnergy => f.write_str("min-energy"),
            Strategy::FiniteHorizon {
                m,
                terminal_speed: true,
            } => write!(f, "horizon:{m}"),
            Strategy::FiniteHorizon {
                m,
                terminal_speed: false,
            } => write!(f, "horizon:{m}:time-only"),
        }
    }
}

impl FromStr for Strategy {
    type Err = PlanError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || PlanError::UnknownStrategy(s.to_string());
        match s {
            "nominal" => return Ok(Strategy::Nominal),
            "tight" => return Ok(Strategy::Tight),
            "reactive" => return Ok(Strategy::Reactive(ReactiveMode::FullMap)),
            "reactive-strict" => return Ok(Strategy::Reactive(ReactiveMode::Strict)),
            "min-energy" | "full" => return Ok(Strategy::MinEnergy),
            _ => {}
        }
        let rest = s.strip_prefix("horizon:").ok_or_else(bad)?;
        let (m, terminal_speed) = match rest.split_once(':') {
            None => (rest, true),
            Some((m, "time-only")) => (m, false),
            Some(_) => return Err(bad()),
        };
        let m: usize = m.parse().map_err(|_| bad())?;
        if m == 0 {
            return Err(PlanError::InvalidHorizon);
        }
        Ok(Strategy::FiniteHorizon { m, terminal_speed })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlanSpec {
    pub strategy: Strategy,
    pub solver: SolverSettings,
}

impl PlanSpec {
    pub fn new(strategy: Strategy) -> Self {
        Self {
            strategy,
            solver: SolverSettings::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Residuals {
    /// Final pre-transition speed minus the nominal one.
    pub terminal_speed: f64,
    /// Total time minus `N·T`.
    pub total_time: f64,
}

impl Residuals {
    pub fn max_abs(&self) -> f64 {
        self.terminal_speed.abs().max(self.total_time.abs())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum PlanIssue {
    /// An optimization started at this step missed its tolerances.
    NotConverged {
        step: i64,
        residual: f64,
        stationarity: f64,
    },
    /// Nominal step time was out of reach with push-offs in bounds.
    TimingClamped {
        step: i64,
        pushoff: f64,
        time_error: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanResult {
    pub strategy: Strategy,
    pub trajectory: GaitTrajectory,
    /// Every optimization the strategy ran met its tolerances. Strategies
    /// without an optimization report `true`.
    pub converged: bool,
    pub residuals: Residuals,
    /// Extra work as a fraction of nominal work.
    pub work_excess: f64,
    pub issues: Vec<PlanIssue>,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PlanError {
    #[error(transparent)]
    Terrain(#[from] TerrainError),
    #[error("no feasible push-offs at step {step}: {source}")]
    Infeasible {
        step: i64,
        #[source]
        source: DynamicsError,
    },
    #[error("horizon must be at least one step")]
    InvalidHorizon,
    #[error("solver setting `{0}` must be positive")]
    InvalidSettings(&'static str),
    #[error("unknown strategy `{0}` (expected nominal, tight, reactive, reactive-strict, min-energy or horizon:<m>)")]
    UnknownStrategy(String),
}

impl From<RolloutError> for PlanError {
    fn from(e: RolloutError) -> Self {
        match e {
            RolloutError::Terrain(t) => PlanError::Terrain(t),
            RolloutError::Dynamics(d) => {
                let step = match &d {
                    DynamicsError::AtStep { index, .. } => *index,
                    _ => 0,
                };
                PlanError::Infeasible {
                    step,
                    source: d.root().clone(),
                }
            }
            RolloutError::LengthMismatch { .. } => {
                unreachable!("planners emit one push-off per step")
            }
        }
    }
}

/// Runs the strategy selected by `spec`.
pub fn plan(
    params: &ModelParams,
    terrain: &TerrainProfile,
    spec: &PlanSpec,
) -> Result<PlanResult, PlanError> {
    let s = &spec.solver;
    match spec.strategy {
        Strategy::Nominal => solve_nominal(params, terrain),
        Strategy::Tight => solve_tight(params, terrain, s),
        Strategy::Reactive(mode) => solve_reactive(params, terrain, mode, s),
        Strategy::MinEnergy => solve_full_horizon(params, terrain, s),
        Strategy::FiniteHorizon { m, terminal_speed } => {
            solve_finite_horizon(params, terrain, m, terminal_speed, s)
        }
    }
}

/// Terrain-derived quantities shared by the strategies.
struct Course {
    alpha: f64,
    nominal_speed: f64,
    step_time: f64,
    upper_bound: f64,
    nominal_pushoff: f64,
    /// `N + 1` disturbances.
    deltas: Vec<f64>,
    first_index: i64,
}

impl Course {
    fn new(
        params: &ModelParams,
        terrain: &TerrainProfile,
        settings: &SolverSettings,
    ) -> Result<Self, PlanError> {
        settings.validate()?;
        Ok(Self {
            alpha: params.alpha,
            nominal_speed: params.pre_transition_speed(),
            step_time: params.step_time,
            upper_bound: settings.pushoff_upper_bound * params.pushoff,
            nominal_pushoff: params.pushoff,
            deltas: terrain.disturbances_with_exit(params.step_length)?,
            first_index: -(terrain.pad_before as i64),
        })
    }

    fn len(&self) -> usize {
        self.deltas.len() - 1
    }

    fn index(&self, k: usize) -> i64 {
        self.first_index + k as i64
    }

    /// Solves the minimum-work window starting at step `k` with disturbances
    /// `deltas` (window length plus one).
    #[allow(clippy::too_many_arguments)]
    fn solve_window(
        &self,
        k: usize,
        speed: f64,
        deltas: &[f64],
        time_target: f64,
        terminal_speed: bool,
        settings: &SolverSettings,
        issues: &mut Vec<PlanIssue>,
    ) -> Result<Vec<f64>, PlanError> {
        let n = deltas.len() - 1;
        let problem = WindowProblem {
            alpha: self.alpha,
            initial_speed: speed,
            deltas,
            time_target,
            speed_target: (terminal_speed && n > 1).then_some(self.nominal_speed),
            upper_bound: self.upper_bound,
        };
        let nominal = vec![self.nominal_pushoff; n];
        let initial = if walker::simulate(self.alpha, speed, deltas, &nominal).is_ok() {
            nominal
        } else {
            let (tight, _) =
                tight_sequence(self.alpha, speed, deltas, self.step_time, self.upper_bound)
                    .map_err(|(j, source)| PlanError::Infeasible {
                        step: self.index(k + j),
                        source,
                    })?;
            tight
        };
        let sol = minimize_work(&problem, &initial, settings).map_err(|source| {
            PlanError::Infeasible {
                step: self.index(k),
                source: source.root().clone(),
            }
        })?;
        if !sol.converged {
            issues.push(PlanIssue::NotConverged {
                step: self.index(k),
                residual: sol.residuals[0].abs().max(sol.residuals[1].abs()),
                stationarity: sol.stationarity,
            });
        }
        Ok(sol.pushoffs)
    }
}

fn finish(
    params: &ModelParams,
    terrain: &TerrainProfile,
    strategy: Strategy,
    pushoffs: &[f64],
    converged: bool,
    issues: Vec<PlanIssue>,
) -> Result<PlanResult, PlanError> {
    let trajectory = walker::rollout(params, terrain, pushoffs)?;
    let n = trajectory.steps.len() as f64;
    let residuals = Residuals {
        terminal_speed: trajectory.final_speed - params.pre_transition_speed(),
        total_time: trajectory.total_time - n * params.step_time,
    };
    Ok(PlanResult {
        strategy,
        work_excess: trajectory.work_excess(),
        trajectory,
        converged,
        residuals,
        issues,
    })
}

/// Constant nominal push-off; no compensation.
pub fn solve_nominal(
    params: &ModelParams,
    terrain: &TerrainProfile,
) -> Result<PlanResult, PlanError> {
    let pushoffs = vec![params.pushoff; terrain.step_count()];
    finish(
        params,
        terrain,
        Strategy::Nominal,
        &pushoffs,
        true,
        Vec::new(),
    )
}

/// Minimum total work with the whole terrain known in advance.
pub fn solve_full_horizon(
    params: &ModelParams,
    terrain: &TerrainProfile,
    settings: &SolverSettings,
) -> Result<PlanResult, PlanError> {
    let course = Course::new(params, terrain, settings)?;
    let n = course.len();
    let mut issues = Vec::new();
    let pushoffs = course.solve_window(
        0,
        course.nominal_speed,
        &course.deltas,
        n as f64 * course.step_time,
        true,
        settings,
        &mut issues,
    )?;
    let converged = issues.is_empty();
    finish(
        params,
        terrain,
        Strategy::MinEnergy,
        &pushoffs,
        converged,
        issues,
    )
}

/// Receding horizon: at each step, plan `m` steps ahead with the terrain
/// beyond the window assumed level, execute the first push-off.
///
/// Each window must end on the nominal schedule and, when `terminal_speed`
/// is set and the window has more than one step, at nominal speed.
pub fn solve_finite_horizon(
    params: &ModelParams,
    terrain: &TerrainProfile,
    m: usize,
    terminal_speed: bool,
    settings: &SolverSettings,
) -> Result<PlanResult, PlanError> {
    if m == 0 {
        return Err(PlanError::InvalidHorizon);
    }
    let course = Course::new(params, terrain, settings)?;
    let n = course.len();
    let mut issues = Vec::new();
    let mut pushoffs = Vec::with_capacity(n);
    let mut speed = course.nominal_speed;
    let mut elapsed = 0.0;
    for k in 0..n {
        let end = (k + m).min(n);
        let mut window = course.deltas[k..=end].to_vec();
        if end < n {
            window[end - k] = 0.0;
        }
        let target = end as f64 * course.step_time - elapsed;
        let plan = course.solve_window(
            k,
            speed,
            &window,
            target,
            terminal_speed,
            settings,
            &mut issues,
        )?;
        let u = plan[0];
        let out = execute(&course, k, speed, u)?;
        pushoffs.push(u);
        speed = out.next_pre_transition;
        elapsed += out.step_time;
    }
    let converged = issues.is_empty();
    let strategy = Strategy::FiniteHorizon { m, terminal_speed };
    finish(params, terrain, strategy, &pushoffs, converged, issues)
}

/// Nominal push-offs until unevenness has been stepped on, then minimum-work
/// replanning at every step to regain nominal speed and schedule by the end.
pub fn solve_reactive(
    params: &ModelParams,
    terrain: &TerrainProfile,
    mode: ReactiveMode,
    settings: &SolverSettings,
) -> Result<PlanResult, PlanError> {
    let course = Course::new(params, terrain, settings)?;
    let n = course.len();
    let first_contact = course.deltas[..n].iter().position(|&d| d != 0.0);
    let mut issues = Vec::new();
    let mut pushoffs = Vec::with_capacity(n);
    let mut speed = course.nominal_speed;
    let mut elapsed = 0.0;
    for k in 0..n {
        let informed = first_contact.is_some_and(|j| j < k);
        let u = if informed {
            let window = match mode {
                ReactiveMode::FullMap => course.deltas[k..].to_vec(),
                ReactiveMode::Strict => vec![0.0; n - k + 1],
            };
            let target = n as f64 * course.step_time - elapsed;
            course.solve_window(k, speed, &window, target, true, settings, &mut issues)?[0]
        } else {
            course.nominal_pushoff
        };
        let out = execute(&course, k, speed, u)?;
        pushoffs.push(u);
        speed = out.next_pre_transition;
        elapsed += out.step_time;
    }
    let converged = issues.is_empty();
    finish(
        params,
        terrain,
        Strategy::Reactive(mode),
        &pushoffs,
        converged,
        issues,
    )
}

/// Per-step push-off holding each step time at nominal where possible.
pub fn solve_tight(
    params: &ModelParams,
    terrain: &TerrainProfile,
    settings: &SolverSettings,
) -> Result<PlanResult, PlanError> {
    let course = Course::new(params, terrain, settings)?;
    let (pushoffs, clamped) = tight_sequence(
        course.alpha,
        course.nominal_speed,
        &course.deltas,
        course.step_time,
        course.upper_bound,
    )
    .map_err(|(k, source)| PlanError::Infeasible {
        step: course.index(k),
        source,
    })?;
    let issues = clamped
        .into_iter()
        .map(|(k, time_error)| PlanIssue::TimingClamped {
            step: course.index(k),
            pushoff: pushoffs[k],
            time_error,
        })
        .collect();
    finish(params, terrain, Strategy::Tight, &pushoffs, true, issues)
}

fn execute(
    course: &Course,
    k: usize,
    speed: f64,
    u: f64,
) -> Result<walker::StepOutcome, PlanError> {
    walker::advance(
        course.alpha,
        speed,
        u,
        course.deltas[k],
        course.deltas[k + 1],
    )
    .map_err(|source| PlanError::Infeasible {
        step: course.index(k),
        source,
    })
}

/// Push-off making one step last exactly `target`, clamped to `[0, upper]`.
///
/// Push-offs for which the step cannot complete count as too slow. Returns
/// the push-off and the remaining step time error (zero unless clamped).
pub fn tight_pushoff(
    alpha: f64,
    pre_transition: f64,
    delta: f64,
    delta_next: f64,
    target: f64,
    upper: f64,
) -> Result<(f64, f64), DynamicsError> {
    let excess = |u: f64| {
        walker::transition(pre_transition, u, alpha)
            .and_then(|v| walker::step_time(v, delta, delta_next, alpha))
            .map_or(f64::INFINITY, |tau| tau - target)
    };
    let at_zero = excess(0.0);
    if at_zero <= 0.0 {
        return Ok((0.0, at_zero));
    }
    let at_upper = excess(upper);
    if at_upper > 0.0 {
        if at_upper.is_infinite() {
            let v = walker::transition(pre_transition, upper, alpha)?;
            walker::step_time(v, delta, delta_next, alpha)?;
        }
        return Ok((upper, at_upper));
    }
    let (mut lo, mut hi) = (0.0, upper);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if excess(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok((hi, 0.0))
}

/// Tight regulation over a window; returns push-offs and `(step, time
/// error)` for every clamped step.
#[allow(clippy::type_complexity)]
fn tight_sequence(
    alpha: f64,
    initial_speed: f64,
    deltas: &[f64],
    target: f64,
    upper: f64,
) -> Result<(Vec<f64>, Vec<(usize, f64)>), (usize, DynamicsError)> {
    let n = deltas.len() - 1;
    let mut v = initial_speed;
    let mut pushoffs = Vec::with_capacity(n);
    let mut clamped = Vec::new();
    for k in 0..n {
        let (u, err) =
            tight_pushoff(alpha, v, deltas[k], deltas[k + 1], target, upper).map_err(|e| (k, e))?;
        if err != 0.0 {
            clamped.push((k, err));
        }
        let out = walker::advance(alpha, v, u, deltas[k], deltas[k + 1]).map_err(|e| (k, e))?;
        v = out.next_pre_transition;
        pushoffs.push(u);
    }
    Ok((pushoffs, clamped))
}
