//! Numeric literals with engineering scale suffixes.
//!
//! | suffix | multiplier |
//! |--------|------------|
//! | `p`    | 1e-12      |
//! | `n`    | 1e-9       |
//! | `u`    | 1e-6       |
//! | `m`    | 1e-3       |
//! | `k`    | 1e3        |
//! | `meg`  | 1e6        |
//! | `g`    | 1e9        |
//!
//! Matching is case-insensitive, so `M` is milli and `MEG` is mega. Letters
//! after the suffix are kept as a free-text unit annotation (`2nF`, `1kOhm`)
//! and do not change the value.

use std::fmt;

use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Suffix {
    Pico,
    Nano,
    Micro,
    Milli,
    Kilo,
    Mega,
    Giga,
}

impl Suffix {
    pub const ALL: [Suffix; 7] = [
        Suffix::Pico,
        Suffix::Nano,
        Suffix::Micro,
        Suffix::Milli,
        Suffix::Kilo,
        Suffix::Mega,
        Suffix::Giga,
    ];

    pub fn multiplier(self) -> f64 {
        match self {
            Suffix::Pico => 1e-12,
            Suffix::Nano => 1e-9,
            Suffix::Micro => 1e-6,
            Suffix::Milli => 1e-3,
            Suffix::Kilo => 1e3,
            Suffix::Mega => 1e6,
            Suffix::Giga => 1e9,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Suffix::Pico => "p",
            Suffix::Nano => "n",
            Suffix::Micro => "u",
            Suffix::Milli => "m",
            Suffix::Kilo => "k",
            Suffix::Mega => "meg",
            Suffix::Giga => "g",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ValueError {
    #[error("expected a number, found {0:?}")]
    NotANumber(String),
    #[error("value {0:?} does not resolve to a finite number")]
    NotFinite(String),
}

/// A parsed literal such as `2.5n`, `10MEG` or `4445`.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueLiteral {
    pub magnitude: f64,
    pub suffix: Option<Suffix>,
    pub unit: Option<String>,
}

impl ValueLiteral {
    pub fn plain(value: f64) -> Self {
        Self {
            magnitude: value,
            suffix: None,
            unit: None,
        }
    }

    pub fn value(&self) -> f64 {
        match self.suffix {
            Some(s) => self.magnitude * s.multiplier(),
            None => self.magnitude,
        }
    }

    pub fn parse(text: &str) -> Result<Self, ValueError> {
        let bytes = text.as_bytes();
        let mut i = 0;
        if i < bytes.len() && (bytes[i] == b'+' || bytes[i] == b'-') {
            i += 1;
        }
        let digits_start = i;
        while i < bytes.len() && bytes[i].is_ascii_digit() {
            i += 1;
        }
        let mut mantissa_digits = i - digits_start;
        if i < bytes.len() && bytes[i] == b'.' {
            i += 1;
            let frac_start = i;
            while i < bytes.len() && bytes[i].is_ascii_digit() {
                i += 1;
            }
            mantissa_digits += i - frac_start;
        }
        if mantissa_digits == 0 {
            return Err(ValueError::NotANumber(text.to_string()));
        }
        if i < bytes.len() && (bytes[i] == b'e' || bytes[i] == b'E') {
            let mut j = i + 1;
            if j < bytes.len() && (bytes[j] == b'+' || bytes[j] == b'-') {
                j += 1;
            }
            let exp_start = j;
            while j < bytes.len() && bytes[j].is_ascii_digit() {
                j += 1;
            }
            if j > exp_start {
                i = j;
            }
        }
        let magnitude: f64 = text[..i]
            .parse()
            .map_err(|_| ValueError::NotANumber(text.to_string()))?;
        let rest = &text[i..];
        let lower = rest.to_ascii_lowercase();
        let (suffix, consumed) = if lower.starts_with("meg") {
            (Some(Suffix::Mega), 3)
        } else {
            match lower.chars().next() {
                Some('p') => (Some(Suffix::Pico), 1),
                Some('n') => (Some(Suffix::Nano), 1),
                Some('u') => (Some(Suffix::Micro), 1),
                Some('m') => (Some(Suffix::Milli), 1),
                Some('k') => (Some(Suffix::Kilo), 1),
                Some('g') => (Some(Suffix::Giga), 1),
                _ => (None, 0),
            }
        };
        let unit_text = &rest[consumed..];
        if !unit_text
            .chars()
            .all(|c| c.is_ascii_alphabetic() || c == '/' || c == '^' || c == '_')
        {
            return Err(ValueError::NotANumber(text.to_string()));
        }
        let unit = (!unit_text.is_empty()).then(|| unit_text.to_string());
        let literal = Self {
            magnitude,
            suffix,
            unit,
        };
        if !literal.value().is_finite() {
            return Err(ValueError::NotFinite(text.to_string()));
        }
        Ok(literal)
    }
}

impl fmt::Display for ValueLiteral {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.magnitude)?;
        if let Some(s) = self.suffix {
            f.write_str(s.as_str())?;
        }
        if let Some(u) = &self.unit {
            f.write_str(u)?;
        }
        Ok(())
    }
}

/// Parses a literal and resolves it to a plain number.
pub fn parse_value(text: &str) -> Result<f64, ValueError> {
    ValueLiteral::parse(text).map(|v| v.value())
}

/// Compact engineering rendering for labels (`2.5n`, `240.6k`).
pub fn format_eng(value: f64) -> String {
    if value == 0.0 || !value.is_finite() {
        return format!("{value}");
    }
    let mag = value.abs();
    let (scale, tag) = [
        (1e9, "g"),
        (1e6, "meg"),
        (1e3, "k"),
        (1.0, ""),
        (1e-3, "m"),
        (1e-6, "u"),
        (1e-9, "n"),
        (1e-12, "p"),
    ]
    .into_iter()
    .find(|(s, _)| mag >= *s * 0.999_999_999)
    .unwrap_or((1e-12, "p"));
    let scaled = value / scale;
    let mut text = format!("{scaled:.4}");
    while text.contains('.') && (text.ends_with('0') || text.ends_with('.')) {
        text.pop();
    }
    format!("{text}{tag}")
}
