//! Domain types shared by every pipeline stage.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Target region of a synthesis task.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum RegionId {
    #[serde(rename = "CONUS")]
    Conus,
    Europe,
    EastAsia,
    #[serde(rename = "TCRegion")]
    TcRegion,
}

impl RegionId {
    pub const ALL: [RegionId; 4] = [RegionId::Conus, RegionId::Europe, RegionId::EastAsia, RegionId::TcRegion];

    /// Identifier used in files and on the command line.
    pub fn key(self) -> &'static str {
        match self {
            RegionId::Conus => "CONUS",
            RegionId::Europe => "Europe",
            RegionId::EastAsia => "EastAsia",
            RegionId::TcRegion => "TCRegion",
        }
    }

    /// Wording used inside prompts.
    pub fn prompt_name(self) -> &'static str {
        match self {
            RegionId::Conus => "CONUS",
            RegionId::Europe => "Europe",
            RegionId::EastAsia => "East Asia",
            RegionId::TcRegion => "TC Region",
        }
    }
}

/// Observed weather variable.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum VariableId {
    #[serde(rename = "CR")]
    Cr,
    Precipitation,
    VisibleLight,
    #[serde(rename = "MWBT")]
    Mwbt,
}

impl VariableId {
    pub const ALL: [VariableId; 4] = [VariableId::Cr, VariableId::Precipitation, VariableId::VisibleLight, VariableId::Mwbt];

    pub fn key(self) -> &'static str {
        match self {
            VariableId::Cr => "CR",
            VariableId::Precipitation => "Precipitation",
            VariableId::VisibleLight => "VisibleLight",
            VariableId::Mwbt => "MWBT",
        }
    }

    pub fn prompt_name(self) -> &'static str {
        match self {
            VariableId::Cr => "CR",
            VariableId::Precipitation => "Precipitation",
            VariableId::VisibleLight => "Visible Light",
            VariableId::Mwbt => "MWBT",
        }
    }

    /// Physical value substituted for missing pixels at import, when fixed.
    fn fixed_floor(self) -> Option<f32> {
        match self {
            VariableId::Cr | VariableId::Precipitation => Some(0.0),
            VariableId::VisibleLight | VariableId::Mwbt => None,
        }
    }
}

impl fmt::Display for RegionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

impl fmt::Display for VariableId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

fn squash(s: &str) -> String {
    s.chars().filter(|c| c.is_ascii_alphanumeric()).collect::<String>().to_ascii_lowercase()
}

impl FromStr for RegionId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match squash(s).as_str() {
            "conus" => Ok(RegionId::Conus),
            "europe" | "eur" => Ok(RegionId::Europe),
            "eastasia" | "ea" => Ok(RegionId::EastAsia),
            "tcregion" | "tc" | "tcregions" => Ok(RegionId::TcRegion),
            _ => Err(Error::InvalidArgument(format!("unknown region {s:?}"))),
        }
    }
}

impl FromStr for VariableId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match squash(s).as_str() {
            "cr" => Ok(VariableId::Cr),
            "precipitation" | "prec" | "precip" => Ok(VariableId::Precipitation),
            "visiblelight" | "vis" | "visible" => Ok(VariableId::VisibleLight),
            "mwbt" => Ok(VariableId::Mwbt),
            _ => Err(Error::InvalidArgument(format!("unknown variable {s:?}"))),
        }
    }
}

/// Min-max normalization state, optionally preceded by `log1p`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormState {
    min: f64,
    max: f64,
    #[serde(rename = "log")]
    log_applied: bool,
}

impl NormState {
    pub fn new(min: f64, max: f64, log_applied: bool) -> Result<Self> {
        if !min.is_finite() || !max.is_finite() || max <= min {
            return Err(Error::InvalidRange { min, max });
        }
        Ok(Self { min, max, log_applied })
    }

    pub fn min(&self) -> f64 {
        self.min
    }

    pub fn max(&self) -> f64 {
        self.max
    }

    pub fn log_applied(&self) -> bool {
        self.log_applied
    }

    /// Physical value → `[0, 1]` (clamped).
    pub fn forward(&self, x: f32) -> f32 {
        let v = if self.log_applied { (x as f64).ln_1p() } else { x as f64 };
        ((v - self.min) / (self.max - self.min)).clamp(0.0, 1.0) as f32
    }

    /// `[0, 1]` → physical value.
    pub fn inverse(&self, y: f32) -> f32 {
        let v = self.min + y as f64 * (self.max - self.min);
        (if self.log_applied { v.exp_m1() } else { v }) as f32
    }

    /// Physical span covered by `[0, 1]`.
    pub fn physical_range(&self) -> f64 {
        (self.inverse(1.0) - self.inverse(0.0)) as f64
    }
}

/// Single-variable 2-D grid.
#[derive(Clone, Debug, PartialEq)]
pub struct WeatherField {
    pub data: Array2<f32>,
    pub region: RegionId,
    pub variable: VariableId,
    pub timestamp: i64,
    /// Normalization associated with this field.
    pub norm: Option<NormState>,
    /// Whether `data` currently holds normalized values.
    pub normalized: bool,
}

impl WeatherField {
    /// Physical-unit field.
    pub fn new(data: Array2<f32>, region: RegionId, variable: VariableId, timestamp: i64) -> Result<Self> {
        let (h, w) = data.dim();
        if h == 0 || w == 0 {
            return Err(Error::Shape(format!("empty grid {h}x{w}")));
        }
        Ok(Self { data, region, variable, timestamp, norm: None, normalized: false })
    }

    /// Import a raw grid, replacing NaN/missing pixels with the variable's
    /// physical floor (0 for CR and precipitation, the grid minimum otherwise).
    pub fn import(mut data: Array2<f32>, region: RegionId, variable: VariableId, timestamp: i64) -> Result<Self> {
        let floor = variable.fixed_floor().unwrap_or_else(|| {
            let m = data.iter().copied().filter(|v| v.is_finite()).fold(f32::INFINITY, f32::min);
            if m.is_finite() {
                m
            } else {
                0.0
            }
        });
        data.mapv_inplace(|v| if v.is_finite() { v } else { floor });
        Self::new(data, region, variable, timestamp)
    }

    pub fn shape(&self) -> (usize, usize) {
        self.data.dim()
    }
}

/// Co-registered multi-channel satellite input.
#[derive(Clone, Debug, PartialEq)]
pub struct SatelliteStack {
    pub data: Array3<f32>,
    pub channel_names: Vec<String>,
    pub region: RegionId,
    pub timestamp: i64,
}

pub const DEFAULT_CHANNELS: usize = 10;

impl SatelliteStack {
    pub fn new(data: Array3<f32>, channel_names: Vec<String>, region: RegionId, timestamp: i64) -> Result<Self> {
        let (c, h, w) = data.dim();
        if channel_names.len() != c {
            return Err(Error::Shape(format!("{} channel names for {c} channels", channel_names.len())));
        }
        if h == 0 || w == 0 || c == 0 {
            return Err(Error::Shape(format!("empty stack {c}x{h}x{w}")));
        }
        Ok(Self { data, channel_names, region, timestamp })
    }

    pub fn channels(&self) -> usize {
        self.data.dim().0
    }

    pub fn grid(&self) -> (usize, usize) {
        let (_, h, w) = self.data.dim();
        (h, w)
    }
}

/// A (region, variable) synthesis task.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Task {
    pub region: RegionId,
    pub variable: VariableId,
}

impl Task {
    pub const fn new(region: RegionId, variable: VariableId) -> Self {
        Self { region, variable }
    }

    /// The six standard tasks.
    pub const STANDARD: [Task; 6] = [
        Task::new(RegionId::Conus, VariableId::Cr),
        Task::new(RegionId::Conus, VariableId::Precipitation),
        Task::new(RegionId::Europe, VariableId::Precipitation),
        Task::new(RegionId::EastAsia, VariableId::VisibleLight),
        Task::new(RegionId::Europe, VariableId::VisibleLight),
        Task::new(RegionId::TcRegion, VariableId::Mwbt),
    ];
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.region, self.variable)
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (r, v) = s
            .split_once([':', '/', '-'])
            .ok_or_else(|| Error::InvalidArgument(format!("task {s:?} must look like REGION:VARIABLE")))?;
        Ok(Task::new(r.parse()?, v.parse()?))
    }
}
