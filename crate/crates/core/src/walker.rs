//! Step-to-step dynamics of the rimless pendulum walker.
//!
//! Everything here is dimensionless, with body mass `M`, gravity `g` and leg
//! length `L` as base units: speeds are in `sqrt(gL)`, times in `sqrt(L/g)`,
//! work in `MgL`. [`Units`] converts to SI at the I/O boundary.
//!
//! One step `i` consists of a push-off `u_i` by the trailing leg, an inelastic
//! heel-strike collision, and a linearized inverted-pendulum stance phase that
//! lasts until the next foot lands. The landing configuration is perturbed by
//! the angular disturbance `delta_i` of the step height change.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::terrain::{TerrainError, TerrainProfile};

/// Inter-leg half-angle of the nominal gait (rad).
pub const NOMINAL_ALPHA: f64 = 0.41;
/// Push-off work per step of the nominal gait (MgL).
pub const NOMINAL_PUSHOFF: f64 = 0.0342;
/// Step length of the nominal gait in leg lengths (0.79 m for a 1 m leg).
pub const NOMINAL_STEP_LENGTH: f64 = 0.79;
/// Walking speed of the nominal gait (m/s).
pub const NOMINAL_SPEED_MPS: f64 = 1.5;
/// Standard gravity (m/s^2).
pub const STANDARD_GRAVITY: f64 = 9.81;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DynamicsError {
    #[error("push-off work must be non-negative, got {0}")]
    NegativePushoff(f64),
    #[error("height change {rise} is not smaller than step length {step_length}")]
    TerrainTooSteep { rise: f64, step_length: f64 },
    #[error("walker falls backward: post-transition speed {speed} does not exceed alpha + delta = {threshold}")]
    FallBackward { speed: f64, threshold: f64 },
    #[error("insufficient momentum to reach the next foothold (discriminant {discriminant})")]
    InsufficientMomentum { discriminant: f64 },
    #[error("pendulum does not reach mid-stance (discriminant {discriminant})")]
    NoMidstance { discriminant: f64 },
    #[error("non-finite quantity in step dynamics")]
    NonFinite,
    #[error("step {index}: {source}")]
    AtStep {
        index: i64,
        #[source]
        source: Box<DynamicsError>,
    },
}

impl DynamicsError {
    /// Strips any step annotation.
    pub fn root(&self) -> &DynamicsError {
        match self {
            DynamicsError::AtStep { source, .. } => source.root(),
            other => other,
        }
    }

    fn at(self, index: i64) -> Self {
        DynamicsError::AtStep {
            index,
            source: Box::new(self),
        }
    }
}

#[derive(Debug, Error)]
pub enum RolloutError {
    #[error("expected {expected} push-offs for the terrain, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },
    #[error(transparent)]
    Terrain(#[from] TerrainError),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
}

/// Dimensionless walker constants plus the physical base units used for
/// conversion.
///
/// `step_time`, `midstance_speed` and the pre-transition speed are derived
/// from `alpha` and `pushoff` so that the nominal gait is an exact periodic
/// fixed point of the step-to-step map on level ground.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub alpha: f64,
    pub midstance_speed: f64,
    pub step_length: f64,
    pub step_time: f64,
    pub pushoff: f64,
    pub leg_length: f64,
    pub gravity: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Error)]
pub enum ParamsError {
    #[error("alpha must lie in (0, pi/2), got {0}")]
    Alpha(f64),
    #[error("nominal push-off must be positive, got {0}")]
    Pushoff(f64),
    #[error("step length must be positive, got {0}")]
    StepLength(f64),
    #[error("{name} must be positive, got {value}")]
    Unit { name: &'static str, value: f64 },
    #[error("walking speed must be positive, got {0}")]
    Speed(f64),
    #[error("push-off {pushoff} is too small to walk with alpha {alpha}")]
    NoPeriodicGait { alpha: f64, pushoff: f64 },
}

impl Default for ModelParams {
    fn default() -> Self {
        Self::nominal()
    }
}

impl ModelParams {
    /// The nominal human-like gait: alpha 0.41, push-off 0.0342 MgL, 0.79 m
    /// steps with a 1 m leg.
    pub fn nominal() -> Self {
        Self::new(NOMINAL_ALPHA, NOMINAL_PUSHOFF, NOMINAL_STEP_LENGTH)
            .expect("nominal parameters are valid")
    }

    /// Builds the periodic gait for the given half-angle, push-off and
    /// step length, with a 1 m leg and standard gravity.
    pub fn new(alpha: f64, pushoff: f64, step_length: f64) -> Result<Self, ParamsError> {
        if !(alpha > 0.0 && alpha < std::f64::consts::FRAC_PI_2) {
            return Err(ParamsError::Alpha(alpha));
        }
        if !(pushoff > 0.0 && pushoff.is_finite()) {
            return Err(ParamsError::Pushoff(pushoff));
        }
        if !(step_length > 0.0 && step_length.is_finite()) {
            return Err(ParamsError::StepLength(step_length));
        }
        let v = periodic_speed(alpha, pushoff);
        if !(v > alpha) {
            return Err(ParamsError::NoPeriodicGait { alpha, pushoff });
        }
        Ok(Self {
            alpha,
            midstance_speed: (v * v - alpha * alpha).sqrt(),
            step_length,
            step_time: 2.0 * ((v + alpha) / (v - alpha)).sqrt().ln(),
            pushoff,
            leg_length: 1.0,
            gravity: STANDARD_GRAVITY,
        })
    }

    /// Builds the periodic gait walking at `speed_mps` with steps of
    /// `step_length_m`.
    ///
    /// Scaling is anchored at the nominal gait: 1.5 m/s with 0.79 m steps
    /// reproduces [`ModelParams::nominal`] exactly. The half-angle scales in
    /// proportion to step length, the average dimensionless speed in
    /// proportion to the requested speed, and the push-off is whatever makes
    /// the resulting step time periodic.
    pub fn from_gait(
        speed_mps: f64,
        step_length_m: f64,
        leg_length: f64,
        gravity: f64,
    ) -> Result<Self, ParamsError> {
        if !(speed_mps > 0.0 && speed_mps.is_finite()) {
            return Err(ParamsError::Speed(speed_mps));
        }
        if !(step_length_m > 0.0 && step_length_m.is_finite()) {
            return Err(ParamsError::StepLength(step_length_m));
        }
        check_unit("leg length", leg_length)?;
        check_unit("gravity", gravity)?;
        let nominal = Self::nominal();
        let step_length = step_length_m / leg_length;
        let alpha = nominal.alpha * step_length / nominal.step_length;
        let nominal_average = nominal.step_length / nominal.step_time;
        let average = nominal_average * speed_mps / NOMINAL_SPEED_MPS;
        let step_time = step_length / average;
        // Level-ground step time inverts to v = alpha * coth(T / 2).
        let v = alpha / (0.5 * step_time).tanh();
        let pushoff = 0.5 * (v * alpha.tan()).powi(2);
        let mut params = Self::new(alpha, pushoff, step_length)?;
        params.leg_length = leg_length;
        params.gravity = gravity;
        Ok(params)
    }

    /// Gait with the same step length and step time but half-angle `alpha`.
    pub fn with_alpha(&self, alpha: f64) -> Result<Self, ParamsError> {
        if !(alpha > 0.0 && alpha < std::f64::consts::FRAC_PI_2) {
            return Err(ParamsError::Alpha(alpha));
        }
        let v = alpha / (0.5 * self.step_time).tanh();
        let pushoff = 0.5 * (v * alpha.tan()).powi(2);
        let params = Self::new(alpha, pushoff, self.step_length)?;
        params.with_units(self.leg_length, self.gravity)
    }

    /// Same gait with different physical base units.
    pub fn with_units(mut self, leg_length: f64, gravity: f64) -> Result<Self, ParamsError> {
        check_unit("leg length", leg_length)?;
        check_unit("gravity", gravity)?;
        self.leg_length = leg_length;
        self.gravity = gravity;
        Ok(self)
    }

    /// Pre-transition speed of the periodic gait, `sqrt(2 u*) cot(alpha)`.
    pub fn pre_transition_speed(&self) -> f64 {
        periodic_speed(self.alpha, self.pushoff)
    }

    /// Total push-off work of `steps` nominal steps.
    pub fn nominal_work(&self, steps: usize) -> f64 {
        steps as f64 * self.pushoff
    }

    pub fn units(&self) -> Units {
        Units {
            leg_length: self.leg_length,
            gravity: self.gravity,
        }
    }

    /// Deviation of the level-ground step map from periodicity when started
    /// at `pre_transition` with nominal push-off.
    pub fn periodicity_error(&self, pre_transition: f64) -> Result<f64, DynamicsError> {
        let out = advance(self.alpha, pre_transition, self.pushoff, 0.0, 0.0)?;
        Ok((out.next_pre_transition - pre_transition).abs())
    }
}

fn check_unit(name: &'static str, value: f64) -> Result<(), ParamsError> {
    if value > 0.0 && value.is_finite() {
        Ok(())
    } else {
        Err(ParamsError::Unit { name, value })
    }
}

fn periodic_speed(alpha: f64, pushoff: f64) -> f64 {
    // v = v cos 2a + sqrt(2u) sin 2a  =>  v = sqrt(2u) sin 2a / (1 - cos 2a)
    (2.0 * pushoff).sqrt() / alpha.tan()
}

/// Conversion between dimensionless and SI quantities.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Units {
    pub leg_length: f64,
    pub gravity: f64,
}

impl Default for Units {
    fn default() -> Self {
        Self {
            leg_length: 1.0,
            gravity: STANDARD_GRAVITY,
        }
    }
}

impl Units {
    pub fn speed_scale(&self) -> f64 {
        (self.gravity * self.leg_length).sqrt()
    }

    pub fn time_scale(&self) -> f64 {
        (self.leg_length / self.gravity).sqrt()
    }

    pub fn speed_to_si(&self, v: f64) -> f64 {
        v * self.speed_scale()
    }

    pub fn speed_from_si(&self, v: f64) -> f64 {
        v / self.speed_scale()
    }

    pub fn time_to_si(&self, t: f64) -> f64 {
        t * self.time_scale()
    }

    pub fn time_from_si(&self, t: f64) -> f64 {
        t / self.time_scale()
    }

    pub fn length_to_si(&self, x: f64) -> f64 {
        x * self.leg_length
    }

    pub fn length_from_si(&self, x: f64) -> f64 {
        x / self.leg_length
    }

    /// Work per unit body mass (J/kg).
    pub fn work_to_si(&self, w: f64) -> f64 {
        w * self.gravity * self.leg_length
    }

    pub fn work_from_si(&self, w: f64) -> f64 {
        w / (self.gravity * self.leg_length)
    }
}

/// Push-off followed by heel-strike: `v+ = v- cos 2a + sqrt(2u) sin 2a`.
pub fn transition(v_minus: f64, pushoff: f64, alpha: f64) -> Result<f64, DynamicsError> {
    if pushoff < 0.0 {
        return Err(DynamicsError::NegativePushoff(pushoff));
    }
    let two_alpha = 2.0 * alpha;
    Ok(v_minus * two_alpha.cos() + (2.0 * pushoff).sqrt() * two_alpha.sin())
}

/// Angular landing disturbance of a step whose height changes from
/// `previous_height` to `height`.
pub fn disturbance(
    height: f64,
    previous_height: f64,
    step_length: f64,
) -> Result<f64, DynamicsError> {
    let rise = height - previous_height;
    if rise.abs() >= step_length {
        return Err(DynamicsError::TerrainTooSteep { rise, step_length });
    }
    Ok((rise / step_length).asin())
}

/// Stance duration from heel-strike until the next foot lands.
///
/// `delta` is this step's landing disturbance and `delta_next` the next one;
/// the next foot touches down when the leg angle reaches `alpha - delta_next`.
pub fn step_time(
    v_plus: f64,
    delta: f64,
    delta_next: f64,
    alpha: f64,
) -> Result<f64, DynamicsError> {
    let denominator = v_plus - alpha - delta;
    if !(denominator > 0.0) {
        return Err(DynamicsError::FallBackward {
            speed: v_plus,
            threshold: alpha + delta,
        });
    }
    let discriminant = v_plus * v_plus - 2.0 * alpha * (delta + delta_next)
        + delta_next * delta_next
        - delta * delta;
    if discriminant < 0.0 {
        return Err(DynamicsError::InsufficientMomentum { discriminant });
    }
    let tau = ((alpha - delta_next + discriminant.sqrt()) / denominator).ln();
    if !tau.is_finite() {
        return Err(DynamicsError::NonFinite);
    }
    Ok(tau)
}

/// Stance speed after `elapsed` time of linearized pendulum motion.
///
/// Evaluated at the step time this is the next step's pre-transition speed.
pub fn end_of_stance_speed(v_plus: f64, delta: f64, elapsed: f64, alpha: f64) -> f64 {
    let lead = alpha + delta;
    0.5 * ((-elapsed).exp() * (v_plus + lead) + elapsed.exp() * (v_plus - lead))
}

/// Speed and time (since heel-strike) at which the stance leg is vertical.
pub fn midstance(v_plus: f64, delta: f64, alpha: f64) -> Result<(f64, f64), DynamicsError> {
    let lead = alpha + delta;
    let discriminant = v_plus * v_plus - alpha * alpha - 2.0 * alpha * delta - delta * delta;
    if !(discriminant > 0.0) || !(v_plus - lead > 0.0) {
        return Err(DynamicsError::NoMidstance { discriminant });
    }
    let time = (discriminant.sqrt() / (v_plus - lead)).ln();
    Ok((end_of_stance_speed(v_plus, delta, time, alpha), time))
}

/// Result of advancing the walker through one full step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    pub post_transition: f64,
    pub step_time: f64,
    pub next_pre_transition: f64,
    pub midstance_speed: f64,
    pub midstance_time: f64,
}

/// Transition, stance, and mid-stance sampling of one step.
pub fn advance(
    alpha: f64,
    pre_transition: f64,
    pushoff: f64,
    delta: f64,
    delta_next: f64,
) -> Result<StepOutcome, DynamicsError> {
    let post_transition = transition(pre_transition, pushoff, alpha)?;
    let tau = step_time(post_transition, delta, delta_next, alpha)?;
    let (midstance_speed, midstance_time) = midstance(post_transition, delta, alpha)?;
    Ok(StepOutcome {
        post_transition,
        step_time: tau,
        next_pre_transition: end_of_stance_speed(post_transition, delta, tau, alpha),
        midstance_speed,
        midstance_time,
    })
}

/// Terminal pre-transition speed and elapsed time of a push-off sequence.
///
/// `deltas` holds one disturbance per step plus the disturbance of the step
/// following the sequence, so `deltas.len() == pushoffs.len() + 1`. This is
/// the allocation-free path used inside the optimizers.
pub fn simulate(
    alpha: f64,
    pre_transition: f64,
    deltas: &[f64],
    pushoffs: &[f64],
) -> Result<(f64, f64), DynamicsError> {
    debug_assert_eq!(deltas.len(), pushoffs.len() + 1);
    let mut v = pre_transition;
    let mut elapsed = 0.0;
    for (i, &u) in pushoffs.iter().enumerate() {
        let post = transition(v, u, alpha)?;
        let tau = step_time(post, deltas[i], deltas[i + 1], alpha)?;
        v = end_of_stance_speed(post, deltas[i], tau, alpha);
        elapsed += tau;
    }
    Ok((v, elapsed))
}

/// Walker state at the instant just before a step-to-step transition.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepState {
    pub pre_transition_speed: f64,
    pub cumulative_time: f64,
    /// Index of the step about to begin; 0 is the first uneven step.
    pub step_index: i64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    /// Step number relative to the first uneven step.
    pub index: i64,
    pub height_multiple: i32,
    pub disturbance: f64,
    pub pushoff: f64,
    pub pre_transition_speed: f64,
    pub post_transition_speed: f64,
    pub step_time: f64,
    pub midstance_speed: f64,
    /// Time from heel-strike to mid-stance.
    pub midstance_time: f64,
    /// Elapsed time at heel-strike of this step.
    pub start_time: f64,
    /// Nominal elapsed time minus actual elapsed time at the end of this step.
    pub time_gain: f64,
}

impl StepRecord {
    /// Elapsed time at mid-stance.
    pub fn midstance_clock(&self) -> f64 {
        self.start_time + self.midstance_time
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaitTrajectory {
    pub params: ModelParams,
    pub steps: Vec<StepRecord>,
    pub total_work: f64,
    pub total_time: f64,
    /// Pre-transition speed after the final step.
    pub final_speed: f64,
}

impl GaitTrajectory {
    pub fn pushoffs(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.pushoff).collect()
    }

    pub fn midstance_speeds(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.midstance_speed).collect()
    }

    pub fn final_time_gain(&self) -> f64 {
        self.steps.last().map_or(0.0, |s| s.time_gain)
    }

    /// Work above the nominal gait over the same number of steps (MgL).
    pub fn extra_work(&self) -> f64 {
        self.total_work - self.params.nominal_work(self.steps.len())
    }

    /// Extra work as a fraction of nominal work; zero for an empty trajectory.
    pub fn work_excess(&self) -> f64 {
        let nominal = self.params.nominal_work(self.steps.len());
        if nominal > 0.0 {
            self.extra_work() / nominal
        } else {
            0.0
        }
    }
}

/// Rolls a push-off sequence over a terrain starting from nominal walking.
pub fn rollout(
    params: &ModelParams,
    terrain: &TerrainProfile,
    pushoffs: &[f64],
) -> Result<GaitTrajectory, RolloutError> {
    let n = terrain.step_count();
    if pushoffs.len() != n {
        return Err(RolloutError::LengthMismatch {
            expected: n,
            actual: pushoffs.len(),
        });
    }
    let deltas = terrain.disturbances_with_exit(params.step_length)?;
    let heights = terrain.padded_multiples();
    let initial = StepState {
        pre_transition_speed: params.pre_transition_speed(),
        cumulative_time: 0.0,
        step_index: -(terrain.pad_before as i64),
    };
    Ok(rollout_from(params, initial, &heights, &deltas, pushoffs)?)
}

/// Rolls a push-off sequence from an arbitrary state.
///
/// `deltas` carries one extra trailing entry for the step after the last.
pub fn rollout_from(
    params: &ModelParams,
    initial: StepState,
    heights: &[i32],
    deltas: &[f64],
    pushoffs: &[f64],
) -> Result<GaitTrajectory, DynamicsError> {
    assert_eq!(heights.len(), pushoffs.len());
    assert_eq!(deltas.len(), pushoffs.len() + 1);
    let mut steps = Vec::with_capacity(pushoffs.len());
    let mut v = initial.pre_transition_speed;
    let mut clock = initial.cumulative_time;
    let mut elapsed_steps = 0.0;
    let mut elapsed_time = 0.0;
    for (k, &u) in pushoffs.iter().enumerate() {
        let index = initial.step_index + k as i64;
        let out = advance(params.alpha, v, u, deltas[k], deltas[k + 1]).map_err(|e| e.at(index))?;
        elapsed_steps += 1.0;
        elapsed_time += out.step_time;
        steps.push(StepRecord {
            index,
            height_multiple: heights[k],
            disturbance: deltas[k],
            pushoff: u,
            pre_transition_speed: v,
            post_transition_speed: out.post_transition,
            step_time: out.step_time,
            midstance_speed: out.midstance_speed,
            midstance_time: out.midstance_time,
            start_time: clock,
            time_gain: elapsed_steps * params.step_time - elapsed_time,
        });
        clock += out.step_time;
        v = out.next_pre_transition;
    }
    Ok(GaitTrajectory {
        params: *params,
        total_work: pushoffs.iter().sum(),
        total_time: elapsed_time,
        final_speed: v,
        steps,
    })
}
