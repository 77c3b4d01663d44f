//! Command-line interface.
//!
//! Exit codes: 0 success, 1 I/O failure, 2 configuration error, 3 solver
//! non-convergence (output is still written), 4 infeasible dynamics.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::analysis::{self, series_io, AnalysisError, LlrSettings, SpeedSeries, SpeedUnit};
use crate::planner::{self, PlanError, PlanResult, PlanSpec, SolverSettings, Strategy};
use crate::terrain::{self, Catalog, TerrainError, TerrainProfile};
use crate::walker::{self, ModelParams, NOMINAL_SPEED_MPS, NOMINAL_STEP_LENGTH, STANDARD_GRAVITY};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Step length grows with speed as `v^PREFERRED_EXPONENT`.
const PREFERRED_EXPONENT: f64 = 0.42;

#[derive(Debug, Parser)]
#[command(
    name = "walkplan",
    version,
    about = "Plan and compare walking over uneven terrain"
)]
pub struct Cli {
    #[command(flatten)]
    pub globals: Globals,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Default, Args)]
pub struct Globals {
    /// Configuration file of `key = value` lines; flags take precedence.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Inter-leg half-angle override (rad).
    #[arg(long, global = true)]
    pub alpha: Option<f64>,
    /// Nominal walking speed (m/s).
    #[arg(long, global = true)]
    pub speed: Option<f64>,
    /// Fixed step length (m); shorthand for `--policy fixed:<m>`.
    #[arg(long, global = true)]
    pub step_length: Option<f64>,
    /// Step-length policy: `fixed`, `fixed:<m>` or `preferred`.
    #[arg(long, global = true)]
    pub policy: Option<String>,
    /// Leg length (m).
    #[arg(long, global = true)]
    pub leg_length: Option<f64>,
    /// Level steps before and after the terrain.
    #[arg(long, global = true)]
    pub pad: Option<usize>,
    /// Seed for shuffled comparisons.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output file; standard output when absent.
    #[arg(long, global = true, value_name = "FILE")]
    pub out: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    pub format: Option<Format>,
    #[arg(long, global = true)]
    pub constraint_tolerance: Option<f64>,
    #[arg(long, global = true)]
    pub optimality_tolerance: Option<f64>,
    #[arg(long, global = true)]
    pub max_iterations: Option<usize>,
    /// Push-off upper bound as a multiple of nominal.
    #[arg(long, global = true)]
    pub pushoff_upper_bound: Option<f64>,
    #[arg(long, global = true)]
    pub gradient_step: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Csv,
    Json,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Plan push-offs for one strategy and write the per-step trajectory.
    Simulate {
        /// Built-in terrain name or terrain file path.
        #[arg(long, default_value = "P")]
        terrain: String,
        /// nominal, tight, reactive, reactive-strict, min-energy or horizon:<m>.
        #[arg(long, default_value = "min-energy")]
        strategy: String,
        /// Write mid-stance speeds in the speed-series CSV format instead.
        #[arg(long)]
        series: bool,
    },
    /// Finite-horizon work and correlation with the full horizon for a
    /// range of horizons.
    SweepHorizon {
        #[arg(long, default_value = "P")]
        terrain: String,
        /// Horizons, e.g. `1-21` or `1,2,8,12-14`; defaults to 1..N.
        #[arg(long)]
        m: Option<String>,
        /// Emit normalized mid-stance speeds per horizon in long format.
        #[arg(long)]
        long: bool,
    },
    /// Compare a model speed series with subject data.
    Compare {
        /// Subject speed-series CSV.
        #[arg(long)]
        data: PathBuf,
        /// Model speed-series CSV; planned live when absent.
        #[arg(long)]
        model: Option<PathBuf>,
        /// Label of the model series within `--model`.
        #[arg(long)]
        model_label: Option<String>,
        #[arg(long, default_value = "P")]
        terrain: String,
        #[arg(long, default_value = "min-energy")]
        strategy: String,
        #[arg(long, default_value_t = 1000)]
        shuffles: usize,
        /// Degrees of freedom of the t density; subjects − 1 when absent.
        #[arg(long)]
        dof: Option<f64>,
        /// Scale floor as a fraction of the model RMS.
        #[arg(long, default_value_t = 1e-6)]
        scale_floor: f64,
    },
    /// Built-in terrain catalog.
    Terrains {
        #[command(subcommand)]
        action: TerrainAction,
    },
    /// Emit a gnuplot script for a file written by `simulate` or
    /// `sweep-horizon`.
    PlotScript {
        #[arg(long, value_enum, default_value = "trajectory")]
        kind: PlotKind,
        /// Data file the script plots.
        #[arg(long)]
        input: PathBuf,
    },
}

#[derive(Debug, Subcommand)]
pub enum TerrainAction {
    /// List built-in terrains.
    List,
    /// Print a terrain with its disturbances.
    Show { name: String },
    /// Write a terrain in the terrain file format.
    Export { name: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PlotKind {
    Trajectory,
    Sweep,
}

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Io(String),
    Infeasible(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Io(_) => 1,
            CliError::Config(_) => 2,
            CliError::Infeasible(_) => 4,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Config(m) | CliError::Io(m) | CliError::Infeasible(m) => m,
        }
    }
}

pub const EXIT_NOT_CONVERGED: i32 = 3;

impl From<PlanError> for CliError {
    fn from(e: PlanError) -> Self {
        match e {
            PlanError::Infeasible { .. } | PlanError::Terrain(TerrainError::TooSteep { .. }) => {
                CliError::Infeasible(e.to_string())
            }
            other => CliError::Config(other.to_string()),
        }
    }
}

impl From<AnalysisError> for CliError {
    fn from(e: AnalysisError) -> Self {
        match e {
            AnalysisError::Plan(p) => p.into(),
            AnalysisError::Io(m) => CliError::Io(m),
            other => CliError::Config(other.to_string()),
        }
    }
}

/// Fully resolved settings shared by all subcommands.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub params: ModelParams,
    pub speed: f64,
    pub policy: StepPolicy,
    pub pad: Option<usize>,
    pub seed: u64,
    pub out: Option<PathBuf>,
    pub format: Format,
    pub solver: SolverSettings,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StepPolicy {
    Fixed(f64),
    Preferred,
}

impl StepPolicy {
    pub fn step_length(&self, speed: f64) -> f64 {
        match self {
            StepPolicy::Fixed(s) => *s,
            StepPolicy::Preferred => preferred_step_length(speed),
        }
    }
}

impl std::fmt::Display for StepPolicy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            StepPolicy::Fixed(s) => write!(f, "fixed:{s}"),
            StepPolicy::Preferred => f.write_str("preferred"),
        }
    }
}

/// Preferred step length (m) at `speed` (m/s), 0.79 m at 1.5 m/s.
pub fn preferred_step_length(speed: f64) -> f64 {
    NOMINAL_STEP_LENGTH * (speed / NOMINAL_SPEED_MPS).powf(PREFERRED_EXPONENT)
}

fn parse_policy(s: &str) -> Result<StepPolicy, CliError> {
    match s {
        "preferred" => Ok(StepPolicy::Preferred),
        "fixed" => Ok(StepPolicy::Fixed(NOMINAL_STEP_LENGTH)),
        _ => {
            let len = s
                .strip_prefix("fixed:")
                .and_then(|v| v.parse::<f64>().ok())
                .ok_or_else(|| {
                    CliError::Config(format!(
                        "invalid policy `{s}` (expected fixed, fixed:<m> or preferred)"
                    ))
                })?;
            Ok(StepPolicy::Fixed(len))
        }
    }
}

const CONFIG_KEYS: [&str; 14] = [
    "alpha",
    "speed",
    "step_length",
    "policy",
    "leg_length",
    "pad",
    "seed",
    "out",
    "format",
    "constraint_tolerance",
    "optimality_tolerance",
    "max_iterations",
    "pushoff_upper_bound",
    "gradient_step",
];

/// Parses a `key = value` configuration file.
pub fn parse_config(text: &str) -> Result<BTreeMap<String, String>, CliError> {
    let mut map = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            CliError::Config(format!("config line {}: expected `key = value`", i + 1))
        })?;
        let key = key.trim().replace('-', "_");
        if !CONFIG_KEYS.contains(&key.as_str()) {
            return Err(CliError::Config(format!(
                "config line {}: unknown key `{key}`",
                i + 1
            )));
        }
        map.insert(key, value.trim().to_string());
    }
    Ok(map)
}

fn pick<T: std::str::FromStr>(
    flag: Option<T>,
    file: &BTreeMap<String, String>,
    key: &str,
) -> Result<Option<T>, CliError> {
    if flag.is_some() {
        return Ok(flag);
    }
    file.get(key)
        .map(|v| {
            v.parse::<T>()
                .map_err(|_| CliError::Config(format!("config key `{key}`: invalid value `{v}`")))
        })
        .transpose()
}

impl RunConfig {
    pub fn resolve(g: &Globals) -> Result<Self, CliError> {
        let file = match &g.config {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| {
                    CliError::Config(format!("cannot read config {}: {e}", path.display()))
                })?;
                parse_config(&text)?
            }
            None => BTreeMap::new(),
        };
        let speed = pick(g.speed, &file, "speed")?.unwrap_or(NOMINAL_SPEED_MPS);
        let leg_length = pick(g.leg_length, &file, "leg_length")?.unwrap_or(1.0);
        let step_length: Option<f64> = pick(g.step_length, &file, "step_length")?;
        let policy_text: Option<String> = pick(g.policy.clone(), &file, "policy")?;
        let policy = match (step_length, policy_text) {
            (Some(s), None) => StepPolicy::Fixed(s),
            (Some(s), Some(p)) if p == "fixed" => StepPolicy::Fixed(s),
            (Some(_), Some(p)) => {
                return Err(CliError::Config(format!(
                    "--step-length conflicts with policy `{p}`"
                )));
            }
            (None, Some(p)) => parse_policy(&p)?,
            (None, None) => StepPolicy::Fixed(NOMINAL_STEP_LENGTH),
        };
        let mut params = ModelParams::from_gait(
            speed,
            policy.step_length(speed),
            leg_length,
            STANDARD_GRAVITY,
        )
        .map_err(|e| CliError::Config(e.to_string()))?;
        if let Some(alpha) = pick(g.alpha, &file, "alpha")? {
            params = params
                .with_alpha(alpha)
                .map_err(|e| CliError::Config(e.to_string()))?;
        }
        let defaults = SolverSettings::default();
        let solver = SolverSettings {
            constraint_tolerance: pick(g.constraint_tolerance, &file, "constraint_tolerance")?
                .unwrap_or(defaults.constraint_tolerance),
            optimality_tolerance: pick(g.optimality_tolerance, &file, "optimality_tolerance")?
                .unwrap_or(defaults.optimality_tolerance),
            max_iterations: pick(g.max_iterations, &file, "max_iterations")?
                .unwrap_or(defaults.max_iterations),
            pushoff_upper_bound: pick(g.pushoff_upper_bound, &file, "pushoff_upper_bound")?
                .unwrap_or(defaults.pushoff_upper_bound),
            gradient_step: pick(g.gradient_step, &file, "gradient_step")?
                .unwrap_or(defaults.gradient_step),
        };
        solver
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        let format = match g.format {
            Some(f) => f,
            None => match file.get("format").map(String::as_str) {
                None | Some("csv") => Format::Csv,
                Some("json") => Format::Json,
                Some(other) => {
                    return Err(CliError::Config(format!(
                        "config key `format`: invalid value `{other}`"
                    )))
                }
            },
        };
        Ok(Self {
            params,
            speed,
            policy,
            pad: pick(g.pad, &file, "pad")?,
            seed: pick(g.seed, &file, "seed")?.unwrap_or(0),
            out: g.out.clone().or_else(|| file.get("out").map(PathBuf::from)),
            format,
            solver,
        })
    }

    /// Canonical description of everything that affects results.
    fn canonical(&self, extra: &[(&str, String)]) -> BTreeMap<String, String> {
        let s = &self.solver;
        let mut map: BTreeMap<String, String> = [
            ("alpha", self.params.alpha.to_string()),
            ("speed", self.speed.to_string()),
            ("policy", self.policy.to_string()),
            ("leg_length", self.params.leg_length.to_string()),
            (
                "pad",
                self.pad.map_or("default".to_string(), |p| p.to_string()),
            ),
            ("seed", self.seed.to_string()),
            ("format", format!("{:?}", self.format).to_lowercase()),
            ("constraint_tolerance", s.constraint_tolerance.to_string()),
            ("optimality_tolerance", s.optimality_tolerance.to_string()),
            ("max_iterations", s.max_iterations.to_string()),
            ("pushoff_upper_bound", s.pushoff_upper_bound.to_string()),
            ("gradient_step", s.gradient_step.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect();
        for (k, v) in extra {
            map.insert((*k).to_string(), v.clone());
        }
        map
    }

    fn provenance(&self, extra: &[(&str, String)]) -> Provenance {
        let canonical = self.canonical(extra);
        let mut text = String::new();
        for (k, v) in &canonical {
            let _ = writeln!(text, "{k}={v}");
        }
        let digest = Sha256::digest(text.as_bytes());
        let config_hash = digest.iter().fold(String::with_capacity(64), |mut acc, b| {
            let _ = write!(acc, "{b:02x}");
            acc
        });
        Provenance {
            tool: "walkplan",
            version: VERSION,
            config_hash,
            config: canonical,
        }
    }

    fn load_terrain(&self, source: &str) -> Result<TerrainProfile, CliError> {
        let catalog = Catalog::builtin();
        let mut profile = match catalog.get(source) {
            Ok(p) => p,
            Err(_) if Path::new(source).is_file() => {
                let text = std::fs::read_to_string(source)
                    .map_err(|e| CliError::Config(format!("cannot read terrain {source}: {e}")))?;
                terrain::parse_terrain(&text)
                    .map_err(|e| CliError::Config(format!("{source}: {e}")))?
            }
            Err(e) => {
                return Err(CliError::Config(format!(
                    "{e}: not a built-in name or terrain file"
                )))
            }
        };
        if let Some(pad) = self.pad {
            profile.pad_before = pad;
            profile.pad_after = pad;
        }
        Ok(profile)
    }
}

#[derive(Debug, Clone, Serialize)]
struct Provenance {
    tool: &'static str,
    version: &'static str,
    config_hash: String,
    config: BTreeMap<String, String>,
}

impl Provenance {
    fn comment_lines(&self) -> Vec<String> {
        vec![
            format!("{} {}", self.tool, self.version),
            format!("config {}", self.config_hash),
        ]
    }

    fn header(&self) -> String {
        self.comment_lines()
            .iter()
            .map(|l| format!("# {l}\n"))
            .collect()
    }
}

fn strategy_of(s: &str) -> Result<Strategy, CliError> {
    s.parse::<Strategy>()
        .map_err(|e| CliError::Config(e.to_string()))
}

/// Parses horizon lists such as `1-4,8,12-14`.
pub fn parse_horizons(s: &str) -> Result<Vec<usize>, CliError> {
    let bad = || CliError::Config(format!("invalid horizon list `{s}`"));
    let mut out = Vec::new();
    for part in s.split(',') {
        let part = part.trim();
        match part.split_once('-') {
            Some((a, b)) => {
                let (a, b): (usize, usize) =
                    (a.parse().map_err(|_| bad())?, b.parse().map_err(|_| bad())?);
                if a == 0 || b < a {
                    return Err(bad());
                }
                out.extend(a..=b);
            }
            None => {
                let m: usize = part.parse().map_err(|_| bad())?;
                if m == 0 {
                    return Err(bad());
                }
                out.push(m);
            }
        }
    }
    Ok(out)
}

struct Output {
    body: String,
    /// Human summary for the terminal.
    summary: Option<String>,
    code: i32,
}

fn fmt_f(x: f64) -> String {
    x.to_string()
}

fn trajectory_csv(result: &PlanResult) -> String {
    let mut s = String::from("i,b_multiple,delta,u,v_plus,tau,v_mid,t_mid,time_gain\n");
    for r in &result.trajectory.steps {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{}",
            r.index,
            r.height_multiple,
            fmt_f(r.disturbance),
            fmt_f(r.pushoff),
            fmt_f(r.post_transition_speed),
            fmt_f(r.step_time),
            fmt_f(r.midstance_speed),
            fmt_f(r.midstance_time),
            fmt_f(r.time_gain)
        );
    }
    s
}

#[derive(Serialize)]
struct Summary {
    terrain: String,
    strategy: String,
    total_work: f64,
    nominal_work: f64,
    work_excess: f64,
    total_time: f64,
    final_time_gain: f64,
    converged: bool,
    terminal_speed_residual: f64,
    total_time_residual: f64,
}

impl Summary {
    fn of(terrain: &TerrainProfile, result: &PlanResult) -> Self {
        let t = &result.trajectory;
        Self {
            terrain: terrain.name.clone(),
            strategy: result.strategy.to_string(),
            total_work: t.total_work,
            nominal_work: t.params.nominal_work(t.steps.len()),
            work_excess: result.work_excess,
            total_time: t.total_time,
            final_time_gain: t.final_time_gain(),
            converged: result.converged,
            terminal_speed_residual: result.residuals.terminal_speed,
            total_time_residual: result.residuals.total_time,
        }
    }

    fn line(&self) -> String {
        format!(
            "{} {}: total work {:.6} MgL, work excess {:.2}%, total time {:.4}, converged {}",
            self.terrain,
            self.strategy,
            self.total_work,
            100.0 * self.work_excess,
            self.total_time,
            self.converged
        )
    }
}

fn cmd_simulate(
    cfg: &RunConfig,
    terrain_src: &str,
    strategy: &str,
    series: bool,
) -> Result<Output, CliError> {
    let terrain = cfg.load_terrain(terrain_src)?;
    let strategy = strategy_of(strategy)?;
    let spec = PlanSpec {
        strategy,
        solver: cfg.solver,
    };
    let result = planner::plan(&cfg.params, &terrain, &spec)?;
    let prov = cfg.provenance(&[
        ("command", "simulate".into()),
        ("terrain", terrain.to_file_string()),
        ("strategy", strategy.to_string()),
        ("series", series.to_string()),
    ]);
    let summary = Summary::of(&terrain, &result);
    let mut warnings: Vec<String> = terrain.warnings();
    warnings.extend(result.issues.iter().map(|i| format!("{i:?}")));
    let body = if series {
        let s = SpeedSeries::from_trajectory(
            strategy.to_string(),
            terrain.name.clone(),
            &result.trajectory,
        );
        let mut buf = Vec::new();
        series_io::write_series(&mut buf, &prov.comment_lines(), &[s])?;
        String::from_utf8(buf).expect("csv output is UTF-8")
    } else {
        match cfg.format {
            Format::Csv => {
                let mut s = prov.header();
                let _ = writeln!(s, "# terrain {} strategy {}", terrain.name, strategy);
                let _ = writeln!(
                    s,
                    "# total_work {} work_excess {} total_time {} converged {}",
                    summary.total_work, summary.work_excess, summary.total_time, summary.converged
                );
                s.push_str(&trajectory_csv(&result));
                s
            }
            Format::Json => {
                #[derive(Serialize)]
                struct Doc<'a> {
                    provenance: &'a Provenance,
                    summary: &'a Summary,
                    params: &'a ModelParams,
                    warnings: &'a [String],
                    steps: &'a [walker::StepRecord],
                }
                let doc = Doc {
                    provenance: &prov,
                    summary: &summary,
                    params: &result.trajectory.params,
                    warnings: &warnings,
                    steps: &result.trajectory.steps,
                };
                serde_json::to_string_pretty(&doc).expect("serializable") + "\n"
            }
        }
    };
    let mut line = summary.line();
    for w in &warnings {
        line.push_str("\nwarning: ");
        line.push_str(w);
    }
    Ok(Output {
        body,
        summary: Some(line),
        code: if result.converged {
            0
        } else {
            EXIT_NOT_CONVERGED
        },
    })
}

fn cmd_sweep(
    cfg: &RunConfig,
    terrain_src: &str,
    m: Option<&str>,
    long: bool,
) -> Result<Output, CliError> {
    let terrain = cfg.load_terrain(terrain_src)?;
    let horizons = match m {
        Some(s) => parse_horizons(s)?,
        None => (1..=terrain.step_count().max(1)).collect(),
    };
    let sweep = analysis::horizon_sweep(&cfg.params, &terrain, &horizons, &cfg.solver)?;
    let m_text = horizons
        .iter()
        .map(usize::to_string)
        .collect::<Vec<_>>()
        .join(",");
    let prov = cfg.provenance(&[
        ("command", "sweep-horizon".into()),
        ("terrain", terrain.to_file_string()),
        ("m", m_text),
        ("long", long.to_string()),
    ]);
    let converged = sweep.rows.iter().all(|r| r.converged);
    let body = match (cfg.format, long) {
        (Format::Json, _) => {
            #[derive(Serialize)]
            struct Doc<'a> {
                provenance: &'a Provenance,
                terrain: &'a str,
                full_horizon_work_excess: f64,
                rows: &'a [analysis::HorizonRow],
            }
            let doc = Doc {
                provenance: &prov,
                terrain: &terrain.name,
                full_horizon_work_excess: sweep.full.work_excess(),
                rows: &sweep.rows,
            };
            serde_json::to_string_pretty(&doc).expect("serializable") + "\n"
        }
        (Format::Csv, false) => {
            let mut s = prov.header();
            let _ = writeln!(
                s,
                "# terrain {} full_horizon_work_excess {}",
                terrain.name,
                sweep.full.work_excess()
            );
            s.push_str("m,work_excess,extra_work,rho_vs_full,converged\n");
            for r in &sweep.rows {
                let _ = writeln!(
                    s,
                    "{},{},{},{},{}",
                    r.m, r.work_excess, r.extra_work, r.rho_vs_full, r.converged
                );
            }
            s
        }
        (Format::Csv, true) => {
            let mut s = prov.header();
            s.push_str("horizon,i,normalized_speed\n");
            let mut emit = |label: String, traj: &walker::GaitTrajectory| {
                let v = traj.midstance_speeds();
                let n = v.len() as f64;
                let mean = v.iter().sum::<f64>() / n;
                let sd = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
                for (step, x) in traj.steps.iter().zip(&v) {
                    let z = if sd > 0.0 { (x - mean) / sd } else { 0.0 };
                    let _ = writeln!(s, "{label},{},{z}", step.index);
                }
            };
            emit("full".into(), &sweep.full);
            for (row, traj) in sweep.rows.iter().zip(&sweep.trajectories) {
                emit(row.m.to_string(), traj);
            }
            s
        }
    };
    let mut summary = format!(
        "{}: {} horizons, full-horizon work excess {:.2}%",
        terrain.name,
        sweep.rows.len(),
        100.0 * sweep.full.work_excess()
    );
    if let Some(r) = sweep.rows.iter().find(|r| r.m >= 8) {
        let _ = write!(summary, ", rho(m={}) {:.4}", r.m, r.rho_vs_full);
    }
    Ok(Output {
        body,
        summary: Some(summary),
        code: if converged { 0 } else { EXIT_NOT_CONVERGED },
    })
}

#[allow(clippy::too_many_arguments)]
fn cmd_compare(
    cfg: &RunConfig,
    data: &Path,
    model_path: Option<&Path>,
    model_label: Option<&str>,
    terrain_src: &str,
    strategy: &str,
    shuffles: usize,
    dof: Option<f64>,
    scale_floor: f64,
) -> Result<Output, CliError> {
    let read = |p: &Path| -> Result<series_io::SeriesSet, CliError> {
        let f = std::fs::File::open(p)
            .map_err(|e| CliError::Config(format!("cannot open {}: {e}", p.display())))?;
        series_io::read_series(f).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))
    };
    let mut warnings = Vec::new();
    let (model, model_desc) = match model_path {
        Some(p) => {
            let set = read(p)?;
            warnings.extend(set.warnings.iter().cloned());
            let s = match model_label {
                Some(l) => set.series.iter().find(|s| s.label == l).cloned(),
                None => set.series.first().cloned(),
            }
            .ok_or_else(|| CliError::Config(format!("{}: no model series found", p.display())))?;
            (s, format!("file:{}", p.display()))
        }
        None => {
            let terrain = cfg.load_terrain(terrain_src)?;
            let spec = PlanSpec {
                strategy: strategy_of(strategy)?,
                solver: cfg.solver,
            };
            let result = planner::plan(&cfg.params, &terrain, &spec)?;
            if !result.converged {
                warnings.push("model plan did not converge".into());
            }
            let s = SpeedSeries::from_trajectory(
                spec.strategy.to_string(),
                terrain.name.clone(),
                &result.trajectory,
            );
            (s, format!("{}:{}", terrain.to_file_string(), spec.strategy))
        }
    };
    let set = read(data)?;
    warnings.extend(set.warnings.iter().cloned());
    let subjects: Vec<SpeedSeries> = set
        .for_terrain(&model.terrain)
        .into_iter()
        .cloned()
        .collect();
    if subjects.is_empty() {
        return Err(AnalysisError::TerrainMismatch {
            model: model.terrain.clone(),
            data: set.terrains().join(","),
        }
        .into());
    }
    let settings = LlrSettings {
        n_shuffles: shuffles,
        seed: cfg.seed,
        scale_floor_fraction: scale_floor,
        dof,
    };
    let report = analysis::compare(&model, &subjects, &cfg.params.units(), &settings)?;
    let data_text = std::fs::read(data).map_err(|e| CliError::Io(e.to_string()))?;
    let data_hash = Sha256::digest(&data_text)
        .iter()
        .fold(String::new(), |mut acc, b| {
            let _ = write!(acc, "{b:02x}");
            acc
        });
    let prov = cfg.provenance(&[
        ("command", "compare".into()),
        ("model", model_desc),
        ("model_unit", SpeedUnit::as_str(&model.unit).into()),
        ("data_sha256", data_hash),
        ("shuffles", shuffles.to_string()),
        ("dof", dof.map_or("auto".into(), |d| d.to_string())),
        ("scale_floor", scale_floor.to_string()),
    ]);
    #[derive(Serialize)]
    struct Doc<'a> {
        provenance: &'a Provenance,
        model_label: &'a str,
        warnings: &'a [String],
        #[serde(flatten)]
        report: &'a analysis::ComparisonReport,
    }
    let body = serde_json::to_string_pretty(&Doc {
        provenance: &prov,
        model_label: &model.label,
        warnings: &warnings,
        report: &report,
    })
    .expect("serializable")
        + "\n";
    let ci = report
        .rho_ci95
        .map_or("n/a".to_string(), |(lo, hi)| format!("[{lo:.3}, {hi:.3}]"));
    let summary = format!(
        "{}: rho {:.4} (95% CI {ci}), p {:.3e}, {:.3} bits/step over {} steps and {} subjects",
        report.terrain,
        report.pearson_rho,
        report.p_value,
        report.llr.bits_per_step,
        report.llr.n_steps,
        report.llr.n_subjects
    );
    Ok(Output {
        body,
        summary: Some(summary),
        code: 0,
    })
}

fn cmd_terrains(cfg: &RunConfig, action: &TerrainAction) -> Result<Output, CliError> {
    let catalog = Catalog::builtin();
    let body = match action {
        TerrainAction::List => {
            let mut s = String::from("name    steps  uneven  status       description\n");
            for e in catalog.entries() {
                let mut p = e.profile.clone();
                if let Some(pad) = cfg.pad {
                    p.pad_before = pad;
                    p.pad_after = pad;
                }
                let _ = writeln!(
                    s,
                    "{:<7} {:>5}  {:>6}  {:<11}  {}",
                    p.name,
                    p.step_count(),
                    p.height_multiples.len(),
                    if e.canonical {
                        "canonical"
                    } else {
                        "approximate"
                    },
                    e.description
                );
            }
            s
        }
        TerrainAction::Show { name } => {
            let p = cfg.load_terrain(name)?;
            let mut s = p.to_file_string();
            let deltas = p
                .disturbances(cfg.params.step_length)
                .map_err(|e| CliError::Infeasible(e.to_string()))?;
            let _ = writeln!(s, "# steps {}", p.step_count());
            let _ = writeln!(s, "# peak_elevation {} L", p.peak_elevation());
            let list: Vec<String> = deltas.iter().map(|d| format!("{d:.5}")).collect();
            let _ = writeln!(s, "# disturbances {}", list.join(" "));
            for w in p.warnings() {
                let _ = writeln!(s, "# warning: {w}");
            }
            s
        }
        TerrainAction::Export { name } => cfg.load_terrain(name)?.to_file_string(),
    };
    Ok(Output {
        body,
        summary: None,
        code: 0,
    })
}

fn cmd_plot_script(kind: PlotKind, input: &Path) -> Output {
    let file = input.display().to_string().replace('\'', "\\'");
    let body = match kind {
        PlotKind::Trajectory => format!(
            "set datafile separator ','\n\
             set datafile commentschars '#'\n\
             set key autotitle columnhead\n\
             set multiplot layout 3,1\n\
             set ylabel 'push-off (MgL)'\n\
             plot '{file}' using 1:4 with linespoints\n\
             set ylabel 'mid-stance speed'\n\
             plot '{file}' using 1:7 with linespoints\n\
             set ylabel 'time gain'\n\
             set xlabel 'step'\n\
             plot '{file}' using 1:9 with linespoints\n\
             unset multiplot\n"
        ),
        PlotKind::Sweep => format!(
            "set datafile separator ','\n\
             set datafile commentschars '#'\n\
             set key autotitle columnhead\n\
             set multiplot layout 2,1\n\
             set ylabel 'work excess'\n\
             plot '{file}' using 1:2 with linespoints\n\
             set ylabel 'correlation with full horizon'\n\
             set xlabel 'horizon m'\n\
             set yrange [*:1]\n\
             plot '{file}' using 1:4 with linespoints\n\
             unset multiplot\n"
        ),
    };
    Output {
        body,
        summary: None,
        code: 0,
    }
}

fn dispatch(cli: &Cli) -> Result<(Output, Option<PathBuf>), CliError> {
    let cfg = RunConfig::resolve(&cli.globals)?;
    let out = match &cli.command {
        Command::Simulate {
            terrain,
            strategy,
            series,
        } => cmd_simulate(&cfg, terrain, strategy, *series)?,
        Command::SweepHorizon { terrain, m, long } => {
            cmd_sweep(&cfg, terrain, m.as_deref(), *long)?
        }
        Command::Compare {
            data,
            model,
            model_label,
            terrain,
            strategy,
            shuffles,
            dof,
            scale_floor,
        } => cmd_compare(
            &cfg,
            data,
            model.as_deref(),
            model_label.as_deref(),
            terrain,
            strategy,
            *shuffles,
            *dof,
            *scale_floor,
        )?,
        Command::Terrains { action } => cmd_terrains(&cfg, action)?,
        Command::PlotScript { kind, input } => cmd_plot_script(*kind, input),
    };
    Ok((out, cfg.out))
}

/// Runs the CLI with explicit streams; returns the process exit code.
pub fn run<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let text = e.render().to_string();
            let _ = if code == 0 {
                stdout.write_all(text.as_bytes())
            } else {
                stderr.write_all(text.as_bytes())
            };
            return code;
        }
    };
    match dispatch(&cli) {
        Ok((out, path)) => {
            let written = match &path {
                Some(p) => std::fs::write(p, &out.body)
                    .map_err(|e| format!("cannot write {}: {e}", p.display())),
                None => stdout
                    .write_all(out.body.as_bytes())
                    .map_err(|e| e.to_string()),
            };
            if let Err(e) = written {
                let _ = writeln!(stderr, "error: {e}");
                return 1;
            }
            if let Some(summary) = out.summary {
                let _ = if path.is_some() {
                    writeln!(stdout, "{summary}")
                } else {
                    writeln!(stderr, "{summary}")
                };
            }
            if out.code == EXIT_NOT_CONVERGED {
                let _ = writeln!(stderr, "error: solver did not converge");
            }
            out.code
        }
        Err(e) => {
            let _ = writeln!(stderr, "error: {}", e.message());
            e.exit_code()
        }
    }
}
