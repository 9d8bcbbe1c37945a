//! Closed truth intervals `[l, u] ⊆ [0, 1]`, the annotation domain of every atom.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Values this close to 0 or 1 are snapped onto the endpoint at construction.
const SNAP_EPSILON: f64 = 1e-12;

/// Tolerance used when comparing bounds for equality.
pub const BOUND_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum IntervalError {
    #[error("interval bounds [{lower}, {upper}] violate 0 <= lower <= upper <= 1")]
    OutOfRange { lower: f64, upper: f64 },
    #[error("malformed interval literal `{0}`")]
    Malformed(String),
}

/// A closed sub-interval of `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct Interval {
    lower: f64,
    upper: f64,
}

impl Interval {
    /// `[0, 1]`: nothing is known.
    pub const UNKNOWN: Interval = Interval { lower: 0.0, upper: 1.0 };
    pub const TRUE: Interval = Interval { lower: 1.0, upper: 1.0 };
    pub const FALSE: Interval = Interval { lower: 0.0, upper: 0.0 };

    pub fn new(lower: f64, upper: f64) -> Result<Self, IntervalError> {
        let (lower, upper) = (snap(lower), snap(upper));
        if !lower.is_finite() || !upper.is_finite() || lower < 0.0 || upper > 1.0 || lower > upper {
            return Err(IntervalError::OutOfRange { lower, upper });
        }
        Ok(Interval { lower, upper })
    }

    pub fn lower(&self) -> f64 {
        self.lower
    }

    pub fn upper(&self) -> f64 {
        self.upper
    }

    /// Strong negation: `[l, u] ↦ [1 - u, 1 - l]`.
    pub fn negate(&self) -> Interval {
        Interval {
            lower: snap(1.0 - self.upper),
            upper: snap(1.0 - self.lower),
        }
    }

    /// True iff `self ⊆ outer`.
    pub fn is_subset_of(&self, outer: &Interval) -> bool {
        outer.lower <= self.lower && self.upper <= outer.upper
    }

    /// `None` when the two intervals are disjoint.
    pub fn intersect(&self, other: &Interval) -> Option<Interval> {
        let lower = self.lower.max(other.lower);
        let upper = self.upper.min(other.upper);
        (lower <= upper).then_some(Interval { lower, upper })
    }

    pub fn is_unknown(&self) -> bool {
        self.lower == 0.0 && self.upper == 1.0
    }

    /// Bound-wise equality within [`BOUND_TOLERANCE`].
    pub fn approx_eq(&self, other: &Interval, tol: f64) -> bool {
        (self.lower - other.lower).abs() <= tol && (self.upper - other.upper).abs() <= tol
    }
}

impl Default for Interval {
    fn default() -> Self {
        Interval::UNKNOWN
    }
}

fn snap(x: f64) -> f64 {
    if x.abs() < SNAP_EPSILON {
        0.0
    } else if (x - 1.0).abs() < SNAP_EPSILON {
        1.0
    } else {
        x
    }
}

/// Renders a bound with at most nine decimals and no trailing zeros.
pub fn format_bound(x: f64) -> String {
    let s = format!("{x:.9}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s == "-0" {
        "0".to_string()
    } else {
        s.to_string()
    }
}

impl fmt::Display for Interval {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{},{}]", format_bound(self.lower), format_bound(self.upper))
    }
}

impl FromStr for Interval {
    type Err = IntervalError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let malformed = || IntervalError::Malformed(s.to_string());
        let inner = s
            .trim()
            .strip_prefix('[')
            .and_then(|r| r.strip_suffix(']'))
            .ok_or_else(malformed)?;
        let (l, u) = inner.split_once(',').ok_or_else(malformed)?;
        let l: f64 = l.trim().parse().map_err(|_| malformed())?;
        let u: f64 = u.trim().parse().map_err(|_| malformed())?;
        Interval::new(l, u)
    }
}

// Serialized through the text form.
impl Serialize for Interval {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Interval {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}
