//! Byte quantities and cgroup limit values.
//!
//! All "MB" figures in this crate are binary megabytes (MiB, 2^20 bytes),
//! which is also what the cgroup v2 interface files report.

use std::fmt;
use std::str::FromStr;

use serde::de::{self, Deserializer, Visitor};
use serde::{Deserialize, Serialize, Serializer};

pub const MIB: u64 = 1 << 20;

/// Converts fractional MiB to bytes, rounding to the nearest byte.
pub fn mib(mb: f64) -> u64 {
    (mb * MIB as f64).round().max(0.0) as u64
}

pub fn to_mib(bytes: u64) -> f64 {
    bytes as f64 / MIB as f64
}

/// Bytes rounded to whole MiB, half-up.
pub fn round_mib(bytes: u64) -> u64 {
    (bytes + MIB / 2) / MIB
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("invalid byte quantity {0:?}")]
pub struct ParseBytesError(pub String);

/// Parses `"1100M"`, `"1G"`, `"512K"`, `"4096"` (bytes). Suffixes are binary.
pub fn parse_bytes(s: &str) -> Result<u64, ParseBytesError> {
    let t = s.trim();
    let err = || ParseBytesError(s.to_string());
    let (num, mult) = match t.char_indices().find(|(_, c)| c.is_ascii_alphabetic()) {
        Some((i, _)) => {
            let mult = match t[i..].to_ascii_lowercase().as_str() {
                "k" | "kb" | "kib" => 1u64 << 10,
                "m" | "mb" | "mib" => 1 << 20,
                "g" | "gb" | "gib" => 1 << 30,
                "b" => 1,
                _ => return Err(err()),
            };
            (&t[..i], mult)
        }
        None => (t, 1),
    };
    let v: f64 = num.trim().parse().map_err(|_| err())?;
    if !v.is_finite() || v < 0.0 {
        return Err(err());
    }
    Ok((v * mult as f64).round() as u64)
}

/// A `memory.high` / `memory.max` style value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Limit {
    #[default]
    Unlimited,
    Bytes(u64),
}

impl Limit {
    pub fn mib(mb: f64) -> Self {
        Limit::Bytes(mib(mb))
    }

    pub fn bytes(self) -> Option<u64> {
        match self {
            Limit::Unlimited => None,
            Limit::Bytes(b) => Some(b),
        }
    }

    pub fn is_unlimited(self) -> bool {
        matches!(self, Limit::Unlimited)
    }

    /// True when `usage` is strictly above the limit.
    pub fn exceeded_by(self, usage: u64) -> bool {
        matches!(self, Limit::Bytes(b) if usage > b)
    }

    /// Amount by which `usage` exceeds the limit, 0 when within it.
    pub fn overshoot(self, usage: u64) -> u64 {
        match self {
            Limit::Bytes(b) => usage.saturating_sub(b),
            Limit::Unlimited => 0,
        }
    }

    pub fn min(self, other: Limit) -> Limit {
        match (self, other) {
            (Limit::Unlimited, o) | (o, Limit::Unlimited) => o,
            (Limit::Bytes(a), Limit::Bytes(b)) => Limit::Bytes(a.min(b)),
        }
    }
}

impl fmt::Display for Limit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Limit::Unlimited => f.write_str("max"),
            Limit::Bytes(b) => write!(f, "{b}"),
        }
    }
}

impl FromStr for Limit {
    type Err = ParseBytesError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s.trim().eq_ignore_ascii_case("max") {
            Ok(Limit::Unlimited)
        } else {
            parse_bytes(s).map(Limit::Bytes)
        }
    }
}

impl Serialize for Limit {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            Limit::Unlimited => s.serialize_str("max"),
            Limit::Bytes(b) => s.serialize_u64(*b),
        }
    }
}

struct LimitVisitor;

impl Visitor<'_> for LimitVisitor {
    type Value = Limit;

    fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("\"max\", null, a byte count, or a string like \"400M\"")
    }

    fn visit_u64<E: de::Error>(self, v: u64) -> Result<Limit, E> {
        Ok(Limit::Bytes(v))
    }

    fn visit_i64<E: de::Error>(self, v: i64) -> Result<Limit, E> {
        u64::try_from(v).map(Limit::Bytes).map_err(|_| E::custom("negative limit"))
    }

    fn visit_str<E: de::Error>(self, v: &str) -> Result<Limit, E> {
        v.parse().map_err(E::custom)
    }

    fn visit_unit<E: de::Error>(self) -> Result<Limit, E> {
        Ok(Limit::Unlimited)
    }

    fn visit_none<E: de::Error>(self) -> Result<Limit, E> {
        Ok(Limit::Unlimited)
    }
}

impl<'de> Deserialize<'de> for Limit {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        d.deserialize_any(LimitVisitor)
    }
}

/// serde helper for plain byte fields that also accept `"1100M"` strings.
pub mod bytes_field {
    use super::*;

    pub fn serialize<S: Serializer>(v: &u64, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u64(*v)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<u64, D::Error> {
        match Limit::deserialize(d)? {
            Limit::Bytes(b) => Ok(b),
            Limit::Unlimited => Err(de::Error::custom("expected a byte quantity, got \"max\"")),
        }
    }
}
