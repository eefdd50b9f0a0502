//! The four ablation variants and the conditioning paths each one keeps.
//!
//! | variant | embedding fusion | gated cross-attention | context source              | input channels |
//! |---------|------------------|-----------------------|-----------------------------|----------------|
//! | `FR`    | off              | off (plain)           | features of `V'_input`      | 6              |
//! | `FR_EF` | on               | off (plain)           | fused `E([R~, V_noisy])`    | 9              |
//! | `FR_GC` | off              | on                    | features of `V'_input`      | 6              |
//! | `FULL`  | on               | on                    | fused `E([R~, V_noisy])`    | 9              |
//!
//! Frame replacement is applied by the trainer and the propagator for every variant.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "FR")]
    Fr,
    #[serde(rename = "FR_EF")]
    FrEf,
    #[serde(rename = "FR_GC")]
    FrGc,
    #[serde(rename = "FULL")]
    Full,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Fr, Variant::FrEf, Variant::FrGc, Variant::Full];

    pub fn use_ef(self) -> bool {
        matches!(self, Variant::FrEf | Variant::Full)
    }

    pub fn use_gc(self) -> bool {
        matches!(self, Variant::FrGc | Variant::Full)
    }

    pub fn in_channels(self) -> usize {
        if self.use_ef() {
            9
        } else {
            6
        }
    }

    pub fn from_flags(use_ef: bool, use_gc: bool) -> Self {
        match (use_ef, use_gc) {
            (false, false) => Variant::Fr,
            (true, false) => Variant::FrEf,
            (false, true) => Variant::FrGc,
            (true, true) => Variant::Full,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Variant::Fr => "FR",
            Variant::FrEf => "FR_EF",
            Variant::FrGc => "FR_GC",
            Variant::Full => "FULL",
        }
    }

    /// The lowercase spelling used on the command line.
    pub fn cli_name(self) -> &'static str {
        match self {
            Variant::Fr => "fr",
            Variant::FrEf => "fr_ef",
            Variant::FrGc => "fr_gc",
            Variant::Full => "full",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "fr" => Ok(Variant::Fr),
            "fr_ef" => Ok(Variant::FrEf),
            "fr_gc" => Ok(Variant::FrGc),
            "full" | "fr_gc_ef" => Ok(Variant::Full),
            other => Err(format!(
                "unknown variant `{other}` (expected fr, fr_ef, fr_gc or full)"
            )),
        }
    }
}
