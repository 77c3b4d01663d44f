//! Terrain profiles: sequences of footfall heights in integer multiples of a
//! unit height, padded with level steps before and after.
//!
//! Profiles are read from and written to a small line-oriented format:
//!
//! ```text
//! # Pyramid with a flat top
//! name = P
//! unit_height = 0.075
//! pad_before = 6
//! pad_after = 6
//! heights = 1 2 3 3 3 3 2 1 0
//! ```
//!
//! A trailing `*` on `heights` keeps the last height for all of `pad_after`
//! instead of returning to level.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::walker::{self, DynamicsError};

pub const DEFAULT_UNIT_HEIGHT: f64 = 0.075;
pub const DEFAULT_PADDING: usize = 6;
pub const DEFAULT_MAX_STEP_DELTA: u32 = 1;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TerrainError {
    #[error("line {line}, column {column}: {message}")]
    Syntax {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("line {line}, column {column}: height multiple `{token}` is not an integer")]
    NonIntegerMultiple {
        line: usize,
        column: usize,
        token: String,
    },
    #[error("terrain file has no `heights` field")]
    MissingHeights,
    #[error("unknown terrain `{0}`")]
    UnknownTerrain(String),
    #[error("terrain too steep at padded step {position}: {source}")]
    TooSteep {
        position: usize,
        #[source]
        source: DynamicsError,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TerrainProfile {
    pub name: String,
    /// Height of one multiple, in leg lengths.
    pub unit_height: f64,
    /// Footfall heights of the uneven section, relative to the initial level.
    pub height_multiples: Vec<i32>,
    pub pad_before: usize,
    pub pad_after: usize,
    /// Keep the final height through `pad_after` instead of returning to 0.
    pub sustain: bool,
    /// Height changes larger than this many multiples per step are flagged.
    pub max_step_delta: u32,
}

impl TerrainProfile {
    pub fn new(name: impl Into<String>, height_multiples: Vec<i32>) -> Self {
        Self {
            name: name.into(),
            unit_height: DEFAULT_UNIT_HEIGHT,
            height_multiples,
            pad_before: DEFAULT_PADDING,
            pad_after: DEFAULT_PADDING,
            sustain: false,
            max_step_delta: DEFAULT_MAX_STEP_DELTA,
        }
    }

    pub fn sustained(mut self) -> Self {
        self.sustain = true;
        self
    }

    pub fn with_padding(mut self, before: usize, after: usize) -> Self {
        self.pad_before = before;
        self.pad_after = after;
        self
    }

    pub fn with_unit_height(mut self, unit_height: f64) -> Self {
        self.unit_height = unit_height;
        self
    }

    /// Level ground of `steps` steps with no padding.
    pub fn level(steps: usize) -> Self {
        Self::new("level", vec![0; steps]).with_padding(0, 0)
    }

    /// Total number of steps `N`.
    pub fn step_count(&self) -> usize {
        self.pad_before + self.height_multiples.len() + self.pad_after
    }

    fn trailing_multiple(&self) -> i32 {
        if self.sustain {
            self.height_multiples.last().copied().unwrap_or(0)
        } else {
            0
        }
    }

    /// Footfall height multiples for all `N` steps.
    pub fn padded_multiples(&self) -> Vec<i32> {
        let mut out = Vec::with_capacity(self.step_count());
        out.extend(std::iter::repeat_n(0, self.pad_before));
        out.extend_from_slice(&self.height_multiples);
        out.extend(std::iter::repeat_n(
            self.trailing_multiple(),
            self.pad_after,
        ));
        out
    }

    /// Footfall heights for all `N` steps, in leg lengths.
    pub fn padded_heights(&self) -> Vec<f64> {
        self.padded_multiples()
            .into_iter()
            .map(|m| m as f64 * self.unit_height)
            .collect()
    }

    /// Elevation of the last footfall relative to the first, in leg lengths.
    pub fn net_elevation(&self) -> f64 {
        self.padded_heights().last().copied().unwrap_or(0.0)
    }

    /// Highest footfall, in leg lengths.
    pub fn peak_elevation(&self) -> f64 {
        self.padded_multiples().into_iter().max().unwrap_or(0) as f64 * self.unit_height
    }

    /// Angular landing disturbance of each of the `N` steps.
    pub fn disturbances(&self, step_length: f64) -> Result<Vec<f64>, TerrainError> {
        let mut deltas = self.disturbances_with_exit(step_length)?;
        deltas.pop();
        Ok(deltas)
    }

    /// Disturbances of the `N` steps followed by that of the step after the
    /// profile, which continues at the final height and is therefore 0.
    pub fn disturbances_with_exit(&self, step_length: f64) -> Result<Vec<f64>, TerrainError> {
        let heights = self.padded_heights();
        let mut previous = 0.0;
        let mut out = Vec::with_capacity(heights.len() + 1);
        for (position, &h) in heights.iter().enumerate() {
            let delta = walker::disturbance(h, previous, step_length)
                .map_err(|source| TerrainError::TooSteep { position, source })?;
            out.push(delta);
            previous = h;
        }
        out.push(0.0);
        Ok(out)
    }

    /// Human-readable notes for height changes above `max_step_delta`.
    pub fn warnings(&self) -> Vec<String> {
        let mut previous = 0;
        let mut notes = Vec::new();
        for (position, m) in self.padded_multiples().into_iter().enumerate() {
            let change = (m - previous).unsigned_abs();
            if change > self.max_step_delta {
                notes.push(format!(
                    "{}: padded step {position} changes height by {change} multiples (limit {})",
                    self.name, self.max_step_delta
                ));
            }
            previous = m;
        }
        notes
    }

    /// Equivalent profile in which the step off the uneven section, if any,
    /// is part of `height_multiples` and `sustain` is set exactly when the
    /// section ends away from level.
    pub fn normalized(&self) -> TerrainProfile {
        let mut out = self.clone();
        let last = out.height_multiples.last().copied().unwrap_or(0);
        if last == 0 {
            out.sustain = false;
        } else if !out.sustain {
            if out.pad_after > 0 {
                out.height_multiples.push(0);
                out.pad_after -= 1;
            } else {
                out.sustain = true;
            }
        }
        out
    }

    /// The same terrain walked in the opposite direction.
    ///
    /// Height changes are mirrored in order and sign so the reversed walk
    /// starts at level 0; padding swaps sides. Applying it twice gives back
    /// the [normalized](Self::normalized) profile.
    pub fn reversed(&self) -> TerrainProfile {
        let norm = self.normalized();
        let mut previous = 0;
        let edges: Vec<i32> = norm
            .height_multiples
            .iter()
            .map(|&h| {
                let e = h - previous;
                previous = h;
                e
            })
            .collect();
        let mut level = 0;
        let multiples: Vec<i32> = edges
            .iter()
            .rev()
            .map(|e| {
                level -= e;
                level
            })
            .collect();
        let sustain = multiples.last().is_some_and(|&m| m != 0);
        let name = if multiples == norm.height_multiples {
            norm.name.clone()
        } else {
            reversed_name(&norm.name)
        };
        TerrainProfile {
            name,
            unit_height: norm.unit_height,
            height_multiples: multiples,
            pad_before: norm.pad_after,
            pad_after: norm.pad_before,
            sustain,
            max_step_delta: norm.max_step_delta,
        }
    }

    /// Terrain file text; fields in fixed order, single spaces.
    pub fn to_file_string(&self) -> String {
        let mut heights: Vec<String> = self.height_multiples.iter().map(i32::to_string).collect();
        if self.sustain {
            heights.push("*".to_string());
        }
        let heights = heights.join(" ");
        let sep = if heights.is_empty() { "" } else { " " };
        format!(
            "name = {}\nunit_height = {}\npad_before = {}\npad_after = {}\nheights ={sep}{heights}\n",
            self.name, self.unit_height, self.pad_before, self.pad_after
        )
    }
}

fn reversed_name(name: &str) -> String {
    const PAIRS: [(&str, &str); 2] = [("U", "D"), ("C1", "C2")];
    for (a, b) in PAIRS {
        if name == a {
            return b.to_string();
        }
        if name == b {
            return a.to_string();
        }
    }
    match name.strip_suffix("-rev") {
        Some(base) => base.to_string(),
        None => format!("{name}-rev"),
    }
}

impl fmt::Display for TerrainProfile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_file_string())
    }
}

impl FromStr for TerrainProfile {
    type Err = TerrainError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_terrain(s)
    }
}

fn syntax(line: usize, column: usize, message: impl Into<String>) -> TerrainError {
    TerrainError::Syntax {
        line,
        column,
        message: message.into(),
    }
}

/// Parses terrain file text, applying defaults for omitted fields.
pub fn parse_terrain(text: &str) -> Result<TerrainProfile, TerrainError> {
    let mut profile = TerrainProfile::new("custom", Vec::new());
    let mut seen_heights = false;
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let content = raw.split('#').next().unwrap_or("");
        if content.trim().is_empty() {
            continue;
        }
        let Some(eq) = content.find('=') else {
            let col = content.len() - content.trim_start().len() + 1;
            return Err(syntax(line_no, col, "expected `key = value`"));
        };
        let key = content[..eq].trim();
        let value_start = eq + 1 + (content[eq + 1..].len() - content[eq + 1..].trim_start().len());
        let value = content[eq + 1..].trim();
        let key_col = content.len() - content.trim_start().len() + 1;
        let value_col = value_start + 1;
        match key {
            "name" => {
                if value.is_empty() {
                    return Err(syntax(line_no, value_col, "empty name"));
                }
                profile.name = value.to_string();
            }
            "unit_height" => {
                profile.unit_height = value
                    .parse::<f64>()
                    .ok()
                    .filter(|h| *h > 0.0 && h.is_finite())
                    .ok_or_else(|| {
                        syntax(line_no, value_col, format!("invalid unit_height `{value}`"))
                    })?;
            }
            "pad_before" | "pad_after" => {
                let pad = value
                    .parse::<usize>()
                    .map_err(|_| syntax(line_no, value_col, format!("invalid {key} `{value}`")))?;
                if key == "pad_before" {
                    profile.pad_before = pad;
                } else {
                    profile.pad_after = pad;
                }
            }
            "heights" => {
                let (multiples, sustain) = parse_heights(content, value_start, line_no)?;
                profile.height_multiples = multiples;
                profile.sustain = sustain;
                seen_heights = true;
            }
            "" => return Err(syntax(line_no, key_col, "missing key")),
            other => return Err(syntax(line_no, key_col, format!("unknown key `{other}`"))),
        }
    }
    if !seen_heights {
        return Err(TerrainError::MissingHeights);
    }
    Ok(profile)
}

fn parse_heights(
    content: &str,
    start: usize,
    line_no: usize,
) -> Result<(Vec<i32>, bool), TerrainError> {
    let mut multiples = Vec::new();
    let mut sustain = false;
    let mut offset = start;
    let rest = &content[start..];
    for token in rest.split_whitespace() {
        let pos = offset
            + content[offset..]
                .find(token)
                .expect("token comes from this slice");
        offset = pos + token.len();
        let column = pos + 1;
        if sustain {
            return Err(syntax(
                line_no,
                column,
                "`*` must be the last token of `heights`",
            ));
        }
        if token == "*" {
            if multiples.is_empty() {
                return Err(syntax(line_no, column, "`*` needs a height to sustain"));
            }
            sustain = true;
            continue;
        }
        let m = token
            .parse::<i32>()
            .map_err(|_| TerrainError::NonIntegerMultiple {
                line: line_no,
                column,
                token: token.to_string(),
            })?;
        multiples.push(m);
    }
    Ok((multiples, sustain))
}

#[derive(Debug, Clone, PartialEq)]
pub struct CatalogEntry {
    pub profile: TerrainProfile,
    /// Whether the height sequence is exactly the experimental one rather
    /// than a documented stand-in.
    pub canonical: bool,
    pub description: &'static str,
}

/// The eight built-in terrains: level control plus seven uneven profiles.
#[derive(Debug, Clone)]
pub struct Catalog {
    entries: Vec<CatalogEntry>,
}

/// Stand-in 16-step complex profile within +/-3 multiples.
const COMPLEX_1: [i32; 16] = [1, 2, 1, 0, -1, -2, -1, 0, 1, 2, 3, 2, 1, 0, -1, 0];

impl Catalog {
    pub fn builtin() -> Self {
        let up = TerrainProfile::new("U", vec![1]).sustained();
        let c1 = TerrainProfile::new("C1", COMPLEX_1.to_vec());
        let entries = vec![
            CatalogEntry {
                profile: TerrainProfile::new("control", vec![0]),
                canonical: true,
                description: "level ground",
            },
            CatalogEntry {
                description: "single sustained up-step",
                canonical: true,
                profile: up.clone(),
            },
            CatalogEntry {
                description: "single sustained down-step",
                canonical: true,
                profile: up.reversed(),
            },
            CatalogEntry {
                description: "up-step followed by a down-step (approximate)",
                canonical: false,
                profile: TerrainProfile::new("UD", vec![1, 0]),
            },
            CatalogEntry {
                description: "down-step, level step, up-down sequence (approximate)",
                canonical: false,
                profile: TerrainProfile::new("D&UD", vec![-1, -1, 0, 0]),
            },
            CatalogEntry {
                description: "pyramid with a flat top, peak 0.225 L (approximate)",
                canonical: false,
                profile: TerrainProfile::new("P", vec![1, 2, 3, 3, 3, 3, 2, 1, 0]),
            },
            CatalogEntry {
                description: "16-step complex profile (placeholder sequence)",
                canonical: false,
                profile: c1.clone(),
            },
            CatalogEntry {
                description: "C1 walked in reverse (placeholder sequence)",
                canonical: false,
                profile: c1.reversed(),
            },
        ];
        Self { entries }
    }

    pub fn entries(&self) -> &[CatalogEntry] {
        &self.entries
    }

    pub fn entry(&self, name: &str) -> Option<&CatalogEntry> {
        self.entries
            .iter()
            .find(|e| e.profile.name.eq_ignore_ascii_case(name))
    }

    pub fn get(&self, name: &str) -> Result<TerrainProfile, TerrainError> {
        self.entry(name)
            .map(|e| e.profile.clone())
            .ok_or_else(|| TerrainError::UnknownTerrain(name.to_string()))
    }
}

/// The default flat-topped pyramid (`N = 21`).
pub fn pyramid() -> TerrainProfile {
    Catalog::builtin().get("P").expect("pyramid is built in")
}
