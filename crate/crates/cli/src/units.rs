//! Human-friendly quantities: bare numbers are SI (seconds, hertz), strings
//! carry a unit suffix such as `"120 us"` or `"60 kHz"`.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::ConfigError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Quantity {
    Number(f64),
    Text(String),
}

impl From<f64> for Quantity {
    fn from(x: f64) -> Self {
        Quantity::Number(x)
    }
}

impl From<&str> for Quantity {
    fn from(s: &str) -> Self {
        Quantity::Text(s.to_string())
    }
}

const TIME_UNITS: [(&str, f64); 6] = [
    ("ms", 1e-3),
    ("us", 1e-6),
    ("μs", 1e-6),
    ("µs", 1e-6),
    ("ns", 1e-9),
    ("s", 1.0),
];

/// Frequencies convert to rad/s.
const FREQ_UNITS: [(&str, f64); 4] = [
    ("rad/s", 1.0),
    ("MHz", 2.0 * PI * 1e6),
    ("kHz", 2.0 * PI * 1e3),
    ("Hz", 2.0 * PI),
];

fn parse(q: &Quantity, units: &[(&str, f64)], bare: f64, path: &str) -> Result<f64, ConfigError> {
    let v = match q {
        Quantity::Number(x) => x * bare,
        Quantity::Text(s) => {
            let s = s.trim();
            let (num, scale) = units
                .iter()
                .find_map(|&(u, k)| s.strip_suffix(u).map(|n| (n.trim(), k)))
                .unwrap_or((s, bare));
            let x: f64 = num
                .parse()
                .map_err(|_| ConfigError::new(path, format!("cannot read {s:?} as a quantity")))?;
            x * scale
        }
    };
    if !v.is_finite() {
        return Err(ConfigError::new(path, "must be finite"));
    }
    Ok(v)
}

/// Seconds.
pub fn time(q: &Quantity, path: &str) -> Result<f64, ConfigError> {
    parse(q, &TIME_UNITS, 1.0, path)
}

/// Angular frequency in rad/s; bare numbers are hertz.
pub fn angular(q: &Quantity, path: &str) -> Result<f64, ConfigError> {
    parse(q, &FREQ_UNITS, 2.0 * PI, path)
}
