use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::HpoError;

/// A sampled hyperparameter assignment, keyed by dimension name.
pub type Point = BTreeMap<String, f64>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scale {
    Linear,
    Log,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ParamKind {
    Float {
        low: f64,
        high: f64,
        scale: Scale,
        /// Values are snapped to multiples of `step`.
        step: Option<f64>,
    },
    Int {
        low: i64,
        high: i64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dimension {
    pub name: String,
    pub kind: ParamKind,
}

const GRID_TOL: f64 = 1e-9;

impl Dimension {
    pub fn float(name: &str, low: f64, high: f64, scale: Scale, step: Option<f64>) -> Self {
        Dimension {
            name: name.into(),
            kind: ParamKind::Float { low, high, scale, step },
        }
    }

    pub fn int(name: &str, low: i64, high: i64) -> Self {
        Dimension {
            name: name.into(),
            kind: ParamKind::Int { low, high },
        }
    }

    fn validate(&self) -> Result<(), HpoError> {
        let bad = |m: String| Err(HpoError::Config(format!("dimension {:?}: {m}", self.name)));
        if self.name.is_empty() {
            return bad("empty name".into());
        }
        match self.kind {
            ParamKind::Float { low, high, scale, step } => {
                if !(low.is_finite() && high.is_finite() && low < high) {
                    return bad(format!("invalid range [{low}, {high}]"));
                }
                if scale == Scale::Log && low <= 0.0 {
                    return bad("log scale needs a positive lower bound".into());
                }
                if let Some(s) = step {
                    if !(s > 0.0) || (high / s).floor() < (low / s).ceil() {
                        return bad(format!("grid step {s} has no point in range"));
                    }
                }
            }
            ParamKind::Int { low, high } => {
                if low > high {
                    return bad(format!("invalid range [{low}, {high}]"));
                }
            }
        }
        Ok(())
    }

    /// Lower and upper bounds in the modelling space (log for log scale).
    pub fn internal_bounds(&self) -> (f64, f64) {
        match self.kind {
            ParamKind::Float { low, high, scale: Scale::Log, .. } => (low.ln(), high.ln()),
            ParamKind::Float { low, high, .. } => (low, high),
            ParamKind::Int { low, high } => (low as f64 - 0.5, high as f64 + 0.5),
        }
    }

    pub fn to_internal(&self, v: f64) -> f64 {
        match self.kind {
            ParamKind::Float { scale: Scale::Log, .. } => v.ln(),
            _ => v,
        }
    }

    /// Maps a modelling-space value back to a legal parameter value.
    pub fn from_internal(&self, x: f64) -> f64 {
        match self.kind {
            ParamKind::Float { low, high, scale, step } => {
                let v = match scale {
                    Scale::Log => x.exp(),
                    Scale::Linear => x,
                }
                .clamp(low, high);
                match step {
                    Some(s) => {
                        let lo = (low / s - GRID_TOL).ceil();
                        let hi = (high / s + GRID_TOL).floor();
                        (v / s).round().clamp(lo, hi) * s
                    }
                    None => v,
                }
            }
            ParamKind::Int { low, high } => x.round().clamp(low as f64, high as f64),
        }
    }

    pub fn contains(&self, v: f64) -> bool {
        match self.kind {
            ParamKind::Float { low, high, step, .. } => {
                let span = high - low;
                let in_range = v >= low - GRID_TOL * span && v <= high + GRID_TOL * span;
                let on_grid = step.is_none_or(|s| ((v / s) - (v / s).round()).abs() < 1e-6);
                in_range && on_grid
            }
            ParamKind::Int { low, high } => v.fract() == 0.0 && v >= low as f64 && v <= high as f64,
        }
    }

    pub fn sample_prior<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let (lo, hi) = match self.kind {
            ParamKind::Int { low, high } => (low as f64 - 0.5, high as f64 + 0.5),
            _ => self.internal_bounds(),
        };
        let u: f64 = rng.random();
        self.from_internal(lo + u * (hi - lo))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HpoSpace {
    pub dims: Vec<Dimension>,
}

impl Default for HpoSpace {
    fn default() -> Self {
        HpoSpace {
            dims: vec![
                Dimension::float("lr", 1e-3, 2e-2, Scale::Log, Some(5e-5)),
                Dimension::int("prefix_length", 5, 50),
                Dimension::float("lambda", 1e-4, 1e-1, Scale::Log, None),
            ],
        }
    }
}

impl HpoSpace {
    /// The learning-rate dimension alone.
    pub fn lr_only() -> Self {
        HpoSpace {
            dims: vec![Dimension::float("lr", 1e-3, 2e-2, Scale::Log, Some(5e-5))],
        }
    }

    pub fn validate(&self) -> Result<(), HpoError> {
        if self.dims.is_empty() {
            return Err(HpoError::Config("search space has no dimensions".into()));
        }
        for (i, d) in self.dims.iter().enumerate() {
            d.validate()?;
            if self.dims[..i].iter().any(|o| o.name == d.name) {
                return Err(HpoError::Config(format!("duplicate dimension {}", d.name)));
            }
        }
        Ok(())
    }

    pub fn contains(&self, p: &Point) -> Result<(), String> {
        if p.len() != self.dims.len() {
            return Err(format!("{} values for {} dimensions", p.len(), self.dims.len()));
        }
        for d in &self.dims {
            match p.get(&d.name) {
                Some(&v) if d.contains(v) => {}
                Some(&v) => return Err(format!("{} = {v} outside its range or grid", d.name)),
                None => return Err(format!("missing {}", d.name)),
            }
        }
        Ok(())
    }
}
