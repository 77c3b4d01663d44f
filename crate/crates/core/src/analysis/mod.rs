//! Trajectory comparison: correlation, amplitude scaling, likelihood ratios
//! against shuffled models, and horizon sweeps.

pub mod series_io;

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF, Normal, StudentsT};
use thiserror::Error;

use crate::planner::{self, PlanError, SolverSettings};
use crate::terrain::TerrainProfile;
use crate::walker::{GaitTrajectory, ModelParams, Units};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AnalysisError {
    #[error("need at least {needed} aligned points, found {found}")]
    TooShort { needed: usize, found: usize },
    #[error("{0} series has zero variance")]
    ZeroVariance(&'static str),
    #[error("series lengths differ: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("step indices of `{label}` are not strictly increasing (line {line})")]
    NonMonotone { label: String, line: usize },
    #[error("malformed header `{found}`; expected `label,terrain,step_index,speed,unit`")]
    MalformedHeader { found: String },
    #[error("line {line}: unit differs from earlier rows")]
    MixedUnits { line: usize },
    #[error("line {line}: {message}")]
    Row { line: usize, message: String },
    #[error("I/O error: {0}")]
    Io(String),
    #[error("need at least two subject series, found {0}")]
    TooFewSubjects(usize),
    #[error("number of shuffles must be at least one")]
    NoShuffles,
    #[error("unit mismatch: {0} vs {1}")]
    UnitMismatch(SpeedUnit, SpeedUnit),
    #[error("terrain mismatch: model is `{model}`, data is `{data}`")]
    TerrainMismatch { model: String, data: String },
    #[error(transparent)]
    Plan(#[from] PlanError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SpeedUnit {
    #[serde(rename = "dimensionless")]
    Dimensionless,
    #[serde(rename = "m_per_s")]
    MetersPerSecond,
}

impl SpeedUnit {
    pub fn as_str(&self) -> &'static str {
        match self {
            SpeedUnit::Dimensionless => "dimensionless",
            SpeedUnit::MetersPerSecond => "m_per_s",
        }
    }
}

impl fmt::Display for SpeedUnit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SpeedUnit {
    type Err = ();

    fn from_str(s: &str) -> Result<Self, ()> {
        match s {
            "dimensionless" => Ok(SpeedUnit::Dimensionless),
            "m_per_s" => Ok(SpeedUnit::MetersPerSecond),
            _ => Err(()),
        }
    }
}

/// Per-step speeds of one walker on one terrain; step 0 is the first uneven
/// step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeedSeries {
    pub label: String,
    pub terrain: String,
    pub step_indices: Vec<i64>,
    pub speeds: Vec<f64>,
    pub unit: SpeedUnit,
}

impl SpeedSeries {
    pub fn new(
        label: impl Into<String>,
        terrain: impl Into<String>,
        step_indices: Vec<i64>,
        speeds: Vec<f64>,
        unit: SpeedUnit,
    ) -> Result<Self, AnalysisError> {
        let label = label.into();
        if step_indices.len() != speeds.len() {
            return Err(AnalysisError::LengthMismatch(
                step_indices.len(),
                speeds.len(),
            ));
        }
        if let Some(i) = step_indices.windows(2).position(|w| w[1] <= w[0]) {
            return Err(AnalysisError::NonMonotone { label, line: i + 2 });
        }
        Ok(Self {
            label,
            terrain: terrain.into(),
            step_indices,
            speeds,
            unit,
        })
    }

    /// Mid-stance speeds of a trajectory, dimensionless.
    pub fn from_trajectory(
        label: impl Into<String>,
        terrain: impl Into<String>,
        trajectory: &GaitTrajectory,
    ) -> Self {
        Self {
            label: label.into(),
            terrain: terrain.into(),
            step_indices: trajectory.steps.iter().map(|s| s.index).collect(),
            speeds: trajectory.midstance_speeds(),
            unit: SpeedUnit::Dimensionless,
        }
    }

    pub fn len(&self) -> usize {
        self.speeds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.speeds.is_empty()
    }

    pub fn mean(&self) -> f64 {
        mean(&self.speeds)
    }

    pub fn rms(&self) -> f64 {
        if self.is_empty() {
            return 0.0;
        }
        (self.speeds.iter().map(|v| v * v).sum::<f64>() / self.len() as f64).sqrt()
    }

    /// Speeds minus the series mean.
    pub fn fluctuations(&self) -> Vec<f64> {
        let m = self.mean();
        self.speeds.iter().map(|v| v - m).collect()
    }

    /// Same series in `unit`, converting with `units`.
    pub fn to_unit(&self, unit: SpeedUnit, units: &Units) -> SpeedSeries {
        let speeds = match (self.unit, unit) {
            (a, b) if a == b => self.speeds.clone(),
            (SpeedUnit::Dimensionless, _) => {
                self.speeds.iter().map(|&v| units.speed_to_si(v)).collect()
            }
            (SpeedUnit::MetersPerSecond, _) => self
                .speeds
                .iter()
                .map(|&v| units.speed_from_si(v))
                .collect(),
        };
        SpeedSeries {
            speeds,
            unit,
            ..self.clone()
        }
    }

    /// Values at the given step indices, which must all be present.
    fn values_at(&self, indices: &[i64]) -> Vec<f64> {
        let mut out = Vec::with_capacity(indices.len());
        let mut j = 0;
        for &i in indices {
            while self.step_indices[j] < i {
                j += 1;
            }
            out.push(self.speeds[j]);
        }
        out
    }
}

fn mean(x: &[f64]) -> f64 {
    if x.is_empty() {
        0.0
    } else {
        x.iter().sum::<f64>() / x.len() as f64
    }
}

/// Step indices present in every series.
pub fn common_indices<'a>(series: impl IntoIterator<Item = &'a SpeedSeries>) -> Vec<i64> {
    let mut iter = series.into_iter();
    let Some(first) = iter.next() else {
        return Vec::new();
    };
    let mut common = first.step_indices.clone();
    for s in iter {
        common.retain(|i| s.step_indices.binary_search(i).is_ok());
    }
    common
}

/// Aligns two series on their common step indices.
pub fn align(a: &SpeedSeries, b: &SpeedSeries) -> (Vec<f64>, Vec<f64>) {
    let idx = common_indices([a, b]);
    (a.values_at(&idx), b.values_at(&idx))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Correlation {
    pub rho: f64,
    pub n: usize,
    /// Two-sided, from the t statistic with `n - 2` degrees of freedom.
    pub p_value: f64,
}

impl Correlation {
    /// Fisher-transform confidence interval; `None` for `n <= 3`.
    pub fn confidence_interval(&self, level: f64) -> Option<(f64, f64)> {
        if self.n <= 3 {
            return None;
        }
        let z = Normal::standard().inverse_cdf(0.5 + level / 2.0);
        let center = self.rho.clamp(-1.0 + 1e-15, 1.0 - 1e-15).atanh();
        let half = z / ((self.n - 3) as f64).sqrt();
        Some(((center - half).tanh(), (center + half).tanh()))
    }
}

/// Pearson correlation of two equal-length samples.
pub fn pearson_slices(a: &[f64], b: &[f64]) -> Result<Correlation, AnalysisError> {
    if a.len() != b.len() {
        return Err(AnalysisError::LengthMismatch(a.len(), b.len()));
    }
    let n = a.len();
    if n < 3 {
        return Err(AnalysisError::TooShort {
            needed: 3,
            found: n,
        });
    }
    let (ma, mb) = (mean(a), mean(b));
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 {
        return Err(AnalysisError::ZeroVariance("first"));
    }
    if sbb == 0.0 {
        return Err(AnalysisError::ZeroVariance("second"));
    }
    let rho = (sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0);
    let dof = (n - 2) as f64;
    let p_value = if rho.abs() == 1.0 {
        0.0
    } else {
        let t = rho * (dof / (1.0 - rho * rho)).sqrt();
        let dist = StudentsT::new(0.0, 1.0, dof).expect("positive dof");
        (2.0 * dist.sf(t.abs())).min(1.0)
    };
    Ok(Correlation { rho, n, p_value })
}

/// Pearson correlation of the speed fluctuations of two series on their
/// common steps.
pub fn pearson(a: &SpeedSeries, b: &SpeedSeries) -> Result<Correlation, AnalysisError> {
    let (x, y) = align(a, b);
    pearson_slices(&x, &y)
}

/// How pooled correlations treat each terrain's series.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PoolMode {
    /// Subtract each series' mean before concatenating.
    #[default]
    Fluctuations,
    /// Concatenate speeds as they are.
    Raw,
}

/// Correlation over several aligned pairs concatenated into one sample.
pub fn pearson_pooled(
    pairs: &[(&SpeedSeries, &SpeedSeries)],
    mode: PoolMode,
) -> Result<Correlation, AnalysisError> {
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for (a, b) in pairs {
        let (mut x, mut y) = align(a, b);
        if mode == PoolMode::Fluctuations {
            let (mx, my) = (mean(&x), mean(&y));
            x.iter_mut().for_each(|v| *v -= mx);
            y.iter_mut().for_each(|v| *v -= my);
        }
        xs.extend(x);
        ys.extend(y);
    }
    pearson_slices(&xs, &ys)
}

/// Affine map taking data onto the model: `model ≈ slope·data + intercept`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScaleFit {
    pub slope: f64,
    pub intercept: f64,
}

impl ScaleFit {
    pub fn apply(&self, data: &SpeedSeries) -> SpeedSeries {
        SpeedSeries {
            speeds: data
                .speeds
                .iter()
                .map(|v| self.slope * v + self.intercept)
                .collect(),
            ..data.clone()
        }
    }
}

/// Least-squares regression of model values on data values.
pub fn fit_scale(model: &SpeedSeries, data: &SpeedSeries) -> Result<ScaleFit, AnalysisError> {
    let (m, d) = align(model, data);
    fit_scale_slices(&m, &d)
}

pub fn fit_scale_slices(model: &[f64], data: &[f64]) -> Result<ScaleFit, AnalysisError> {
    if model.len() != data.len() {
        return Err(AnalysisError::LengthMismatch(model.len(), data.len()));
    }
    if model.len() < 2 {
        return Err(AnalysisError::TooShort {
            needed: 2,
            found: model.len(),
        });
    }
    let (mm, md) = (mean(model), mean(data));
    let (mut sdd, mut sdm, mut smm) = (0.0, 0.0, 0.0);
    for (m, d) in model.iter().zip(data) {
        sdd += (d - md) * (d - md);
        sdm += (d - md) * (m - mm);
        smm += (m - mm) * (m - mm);
    }
    if smm == 0.0 {
        return Err(AnalysisError::ZeroVariance("model"));
    }
    if sdd == 0.0 {
        return Err(AnalysisError::ZeroVariance("data"));
    }
    let slope = sdm / sdd;
    Ok(ScaleFit {
        slope,
        intercept: mm - slope * md,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LlrSettings {
    pub n_shuffles: usize,
    pub seed: u64,
    /// Smallest allowed per-step scale as a fraction of the model RMS.
    pub scale_floor_fraction: f64,
    /// Degrees of freedom of the t density; defaults to subjects − 1.
    pub dof: Option<f64>,
}

impl Default for LlrSettings {
    fn default() -> Self {
        Self {
            n_shuffles: 1000,
            seed: 0,
            scale_floor_fraction: 1e-6,
            dof: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlrSummary {
    pub n_steps: usize,
    pub n_subjects: usize,
    /// Log likelihood of the subjects under the model, nats.
    pub loglik_model: f64,
    /// Mean over shuffles of model minus shuffled-model log likelihood.
    pub llr_mean: f64,
    pub llr_sd: f64,
    pub bits_per_step: f64,
    pub bayes_factor: f64,
    pub log10_bayes_factor: f64,
    pub dof: f64,
    pub scale_floor: f64,
    pub floored_steps: usize,
    #[serde(skip)]
    pub llr_values: Vec<f64>,
}

struct LlrInputs {
    model: Vec<f64>,
    subjects: Vec<Vec<f64>>,
    scales: Vec<f64>,
    dof: f64,
    scale_floor: f64,
    floored: usize,
}

fn llr_inputs(
    model: &SpeedSeries,
    subjects: &[SpeedSeries],
    settings: &LlrSettings,
) -> Result<LlrInputs, AnalysisError> {
    if subjects.len() < 2 {
        return Err(AnalysisError::TooFewSubjects(subjects.len()));
    }
    if settings.n_shuffles == 0 {
        return Err(AnalysisError::NoShuffles);
    }
    if let Some(s) = subjects.iter().find(|s| s.unit != model.unit) {
        return Err(AnalysisError::UnitMismatch(model.unit, s.unit));
    }
    let idx = common_indices(std::iter::once(model).chain(subjects));
    if idx.is_empty() {
        return Err(AnalysisError::TooShort {
            needed: 1,
            found: 0,
        });
    }
    let model_values = model.values_at(&idx);
    let subject_values: Vec<Vec<f64>> = subjects.iter().map(|s| s.values_at(&idx)).collect();
    let rms = (model_values.iter().map(|v| v * v).sum::<f64>() / model_values.len() as f64).sqrt();
    let scale_floor = settings.scale_floor_fraction * if rms > 0.0 { rms } else { 1.0 };
    let k = subjects.len() as f64;
    let mut floored = 0;
    let scales = (0..idx.len())
        .map(|i| {
            let m = subject_values.iter().map(|s| s[i]).sum::<f64>() / k;
            let var = subject_values
                .iter()
                .map(|s| (s[i] - m).powi(2))
                .sum::<f64>()
                / (k - 1.0);
            let sd = var.sqrt();
            if sd < scale_floor {
                floored += 1;
                scale_floor
            } else {
                sd
            }
        })
        .collect();
    Ok(LlrInputs {
        model: model_values,
        subjects: subject_values,
        scales,
        dof: settings.dof.unwrap_or(k - 1.0),
        scale_floor,
        floored,
    })
}

fn loglik(inputs: &LlrInputs, locations: &[f64]) -> f64 {
    let mut total = 0.0;
    for (i, (&loc, &scale)) in locations.iter().zip(&inputs.scales).enumerate() {
        let dist = StudentsT::new(loc, scale, inputs.dof).expect("positive scale and dof");
        total += inputs
            .subjects
            .iter()
            .map(|s| dist.ln_pdf(s[i]))
            .sum::<f64>();
    }
    total
}

/// Likelihood of subject series under the model versus under step-shuffled
/// copies of the model.
///
/// Each step contributes a t log density centered on the model value with
/// scale equal to the across-subject standard deviation at that step. Shuffle
/// `j` draws its permutation from a generator seeded with `seed` on stream
/// `j`, so results do not depend on scheduling.
pub fn loglik_ratio(
    model: &SpeedSeries,
    subjects: &[SpeedSeries],
    settings: &LlrSettings,
) -> Result<LlrSummary, AnalysisError> {
    let inputs = llr_inputs(model, subjects, settings)?;
    let base = loglik(&inputs, &inputs.model);
    let llr_values: Vec<f64> = (0..settings.n_shuffles)
        .into_par_iter()
        .map(|j| {
            let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
            rng.set_stream(j as u64);
            let mut shuffled = inputs.model.clone();
            shuffled.shuffle(&mut rng);
            base - loglik(&inputs, &shuffled)
        })
        .collect();
    let n = llr_values.len() as f64;
    let llr_mean = llr_values.iter().sum::<f64>() / n;
    let llr_sd = if llr_values.len() > 1 {
        (llr_values
            .iter()
            .map(|x| (x - llr_mean).powi(2))
            .sum::<f64>()
            / (n - 1.0))
            .sqrt()
    } else {
        0.0
    };
    let n_steps = inputs.model.len();
    Ok(LlrSummary {
        n_steps,
        n_subjects: subjects.len(),
        loglik_model: base,
        llr_mean,
        llr_sd,
        bits_per_step: llr_mean / (n_steps as f64 * std::f64::consts::LN_2),
        bayes_factor: llr_mean.exp(),
        log10_bayes_factor: llr_mean / std::f64::consts::LN_10,
        dof: inputs.dof,
        scale_floor: inputs.scale_floor,
        floored_steps: inputs.floored,
        llr_values,
    })
}

/// Log likelihood ratio of the model against one specific reordering of it.
pub fn loglik_ratio_for_permutation(
    model: &SpeedSeries,
    subjects: &[SpeedSeries],
    permutation: &[usize],
    settings: &LlrSettings,
) -> Result<f64, AnalysisError> {
    let inputs = llr_inputs(model, subjects, settings)?;
    if permutation.len() != inputs.model.len() {
        return Err(AnalysisError::LengthMismatch(
            permutation.len(),
            inputs.model.len(),
        ));
    }
    let shuffled: Vec<f64> = permutation.iter().map(|&i| inputs.model[i]).collect();
    Ok(loglik(&inputs, &inputs.model) - loglik(&inputs, &shuffled))
}

/// Step-wise mean of several series on their common steps.
pub fn mean_series(label: &str, series: &[SpeedSeries]) -> Result<SpeedSeries, AnalysisError> {
    let first = series.first().ok_or(AnalysisError::TooFewSubjects(0))?;
    let idx = common_indices(series);
    let values: Vec<Vec<f64>> = series.iter().map(|s| s.values_at(&idx)).collect();
    let speeds = (0..idx.len())
        .map(|i| values.iter().map(|v| v[i]).sum::<f64>() / series.len() as f64)
        .collect();
    SpeedSeries::new(label, first.terrain.clone(), idx, speeds, first.unit)
}

/// Model-versus-data summary for one terrain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub terrain: String,
    pub n_points: usize,
    pub pearson_rho: f64,
    pub p_value: f64,
    pub rho_ci95: Option<(f64, f64)>,
    /// Maps subject speeds onto the model's amplitude.
    pub regression: ScaleFit,
    #[serde(flatten)]
    pub llr: LlrSummary,
    pub seed: u64,
    pub n_shuffles: usize,
}

/// Correlates the model with the subject mean, rescales subjects onto the
/// model and runs the shuffled likelihood ratio.
pub fn compare(
    model: &SpeedSeries,
    subjects: &[SpeedSeries],
    units: &Units,
    settings: &LlrSettings,
) -> Result<ComparisonReport, AnalysisError> {
    if let Some(s) = subjects.iter().find(|s| s.terrain != model.terrain) {
        return Err(AnalysisError::TerrainMismatch {
            model: model.terrain.clone(),
            data: s.terrain.clone(),
        });
    }
    if subjects.len() < 2 {
        return Err(AnalysisError::TooFewSubjects(subjects.len()));
    }
    let subjects: Vec<SpeedSeries> = subjects
        .iter()
        .map(|s| s.to_unit(model.unit, units))
        .collect();
    let average = mean_series("mean", &subjects)?;
    let corr = pearson(model, &average)?;
    let regression = fit_scale(model, &average)?;
    let scaled: Vec<SpeedSeries> = subjects.iter().map(|s| regression.apply(s)).collect();
    let llr = loglik_ratio(model, &scaled, settings)?;
    Ok(ComparisonReport {
        terrain: model.terrain.clone(),
        n_points: corr.n,
        pearson_rho: corr.rho,
        p_value: corr.p_value,
        rho_ci95: corr.confidence_interval(0.95),
        regression,
        llr,
        seed: settings.seed,
        n_shuffles: settings.n_shuffles,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HorizonRow {
    pub m: usize,
    pub work_excess: f64,
    /// Work above nominal, MgL.
    pub extra_work: f64,
    /// Correlation of mid-stance speeds with the full-horizon plan.
    pub rho_vs_full: f64,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HorizonSweep {
    pub full: GaitTrajectory,
    pub rows: Vec<HorizonRow>,
    pub trajectories: Vec<GaitTrajectory>,
}

/// Finite-horizon plans for each `m`, compared with the full-horizon plan.
/// Horizons are solved in parallel; the output order follows `m_values`.
pub fn horizon_sweep(
    params: &ModelParams,
    terrain: &TerrainProfile,
    m_values: &[usize],
    settings: &SolverSettings,
) -> Result<HorizonSweep, AnalysisError> {
    let full = planner::solve_full_horizon(params, terrain, settings)?;
    let full_speeds = full.trajectory.midstance_speeds();
    let results: Vec<Result<(HorizonRow, GaitTrajectory), AnalysisError>> = m_values
        .par_iter()
        .map(|&m| {
            let r = planner::solve_finite_horizon(params, terrain, m, true, settings)?;
            let rho = pearson_slices(&r.trajectory.midstance_speeds(), &full_speeds)
                .map_or(f64::NAN, |c| c.rho);
            Ok((
                HorizonRow {
                    m,
                    work_excess: r.work_excess,
                    extra_work: r.trajectory.extra_work(),
                    rho_vs_full: rho,
                    converged: r.converged,
                },
                r.trajectory,
            ))
        })
        .collect();
    let mut rows = Vec::with_capacity(results.len());
    let mut trajectories = Vec::with_capacity(results.len());
    for r in results {
        let (row, traj) = r?;
        rows.push(row);
        trajectories.push(traj);
    }
    Ok(HorizonSweep {
        full: full.trajectory,
        rows,
        trajectories,
    })
}
