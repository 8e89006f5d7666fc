use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::{Error, Result};

/// Lag of a wait-k policy; `Infinite` waits for the whole source.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum WaitK {
    Finite(usize),
    Infinite,
}

impl WaitK {
    pub fn new(k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::invalid("wait-k lag must be >= 1"));
        }
        Ok(WaitK::Finite(k))
    }
}

/// Source tokens read before writing target token `t` (1-based):
/// `min(k + t - 1, src_len)`.
pub fn wait_k_z(k: WaitK, t: usize, src_len: usize) -> usize {
    match k {
        WaitK::Finite(k) => (k + t - 1).min(src_len),
        WaitK::Infinite => src_len,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WaitKPath {
    pub k: WaitK,
    pub src_len: usize,
}

impl WaitKPath {
    pub fn new(k: WaitK, src_len: usize) -> Result<Self> {
        if let WaitK::Finite(0) = k {
            return Err(Error::invalid("wait-k lag must be >= 1"));
        }
        if src_len == 0 {
            return Err(Error::invalid("empty source"));
        }
        Ok(WaitKPath { k, src_len })
    }

    pub fn z(&self, t: usize) -> usize {
        wait_k_z(self.k, t, self.src_len)
    }

    /// `z_1 .. z_len`.
    pub fn steps(&self, len: usize) -> Vec<usize> {
        (1..=len).map(|t| self.z(t)).collect()
    }
}

impl fmt::Display for WaitK {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            WaitK::Finite(k) => write!(f, "{k}"),
            WaitK::Infinite => f.write_str("inf"),
        }
    }
}

impl FromStr for WaitK {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "inf" | "infinity" | "INF" | "∞" => Ok(WaitK::Infinite),
            n => WaitK::new(
                n.parse()
                    .map_err(|_| Error::invalid(format!("bad wait-k value `{s}`")))?,
            ),
        }
    }
}

impl Serialize for WaitK {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            WaitK::Finite(k) => s.serialize_u64(*k as u64),
            WaitK::Infinite => s.serialize_str("inf"),
        }
    }
}

impl<'de> Deserialize<'de> for WaitK {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            N(usize),
            S(String),
        }
        match Raw::deserialize(d)? {
            Raw::N(n) => WaitK::new(n).map_err(serde::de::Error::custom),
            Raw::S(s) => s.parse().map_err(serde::de::Error::custom),
        }
    }
}
