use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::CALENDAR_CARDINALITIES;
use crate::error::{Error, Result};

/// Which blocks of the network are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Channel-independent patch attention feeding the head.
    TemporalOnly,
    /// Adds factorization-machine channel mixing and gated fusion.
    PlusFm,
    /// Adds the embedding-wise MLP.
    #[default]
    Full,
}

impl Variant {
    pub fn uses_channel_mixing(self) -> bool {
        self != Variant::TemporalOnly
    }

    pub fn uses_mlp(self) -> bool {
        self == Variant::Full
    }
}

impl FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "temporal-only" => Ok(Variant::TemporalOnly),
            "plus-fm" => Ok(Variant::PlusFm),
            "full" => Ok(Variant::Full),
            other => Err(Error::Config(format!(
                "unknown variant '{other}' (expected temporal-only, plus-fm or full)"
            ))),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::TemporalOnly => "temporal-only",
            Variant::PlusFm => "plus-fm",
            Variant::Full => "full",
        })
    }
}

/// Every architectural hyperparameter of one network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub lookback: usize,
    pub patch_len: usize,
    pub stride: usize,
    pub d_model: usize,
    pub fm_rank: usize,
    pub spatial_rank: usize,
    pub channels: usize,
    pub horizon: usize,
    /// Category counts of the dynamic (per-step) categorical features.
    pub dyn_cardinalities: Vec<usize>,
    /// Category counts of the static per-channel categorical attributes.
    pub static_cat_cardinalities: Vec<usize>,
    /// Attribute codes, one row of length M per channel.
    pub static_categorical: Vec<Vec<usize>>,
    /// Normalized continuous attributes, one row of length Q per channel.
    pub static_continuous: Vec<Vec<f64>>,
    pub dropout: f64,
    pub variant: Variant,
    /// Drop leading steps so the remaining lookback tiles into patches.
    pub truncate_front: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            lookback: 512,
            patch_len: 32,
            stride: 32,
            d_model: 32,
            fm_rank: 8,
            spatial_rank: 8,
            channels: 7,
            horizon: 96,
            dyn_cardinalities: CALENDAR_CARDINALITIES.to_vec(),
            static_cat_cardinalities: Vec::new(),
            static_categorical: Vec::new(),
            static_continuous: Vec::new(),
            dropout: 0.1,
            variant: Variant::Full,
            truncate_front: false,
        }
    }
}

impl ModelConfig {
    /// Number of patches covering the lookback.
    pub fn patches(&self) -> usize {
        (self.lookback - self.patch_len) / self.stride + 1
    }

    /// Leading lookback steps that no patch covers.
    pub fn dropped_steps(&self) -> usize {
        (self.lookback - self.patch_len) % self.stride
    }

    pub fn dyn_features(&self) -> usize {
        self.dyn_cardinalities.len()
    }

    pub fn static_cat_features(&self) -> usize {
        self.static_cat_cardinalities.len()
    }

    pub fn static_cont_features(&self) -> usize {
        self.static_continuous.first().map_or(0, Vec::len)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("lookback", self.lookback),
            ("patch_len", self.patch_len),
            ("stride", self.stride),
            ("d_model", self.d_model),
            ("fm_rank", self.fm_rank),
            ("spatial_rank", self.spatial_rank),
            ("channels", self.channels),
            ("horizon", self.horizon),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.patch_len > self.lookback {
            return Err(Error::Config(format!(
                "patch_len {} exceeds lookback {}",
                self.patch_len, self.lookback
            )));
        }
        if self.dropped_steps() != 0 && !self.truncate_front {
            return Err(Error::Config(format!(
                "lookback {} is not tiled by patch_len {} with stride {}; enable truncate_front or pick divisible sizes",
                self.lookback, self.patch_len, self.stride
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout must lie in [0, 1), got {}", self.dropout)));
        }
        if let Some(k) = self.dyn_cardinalities.iter().position(|&c| c == 0) {
            return Err(Error::Config(format!("dynamic feature {k} has zero categories")));
        }
        let m = self.static_cat_features();
        if m > 0 || !self.static_categorical.is_empty() {
            if self.static_categorical.len() != self.channels {
                return Err(Error::Config(format!(
                    "static_categorical needs one row per channel ({}), got {}",
                    self.channels,
                    self.static_categorical.len()
                )));
            }
            for (c, row) in self.static_categorical.iter().enumerate() {
                if row.len() != m {
                    return Err(Error::Config(format!(
                        "channel {c} has {} static attributes, expected {m}",
                        row.len()
                    )));
                }
                for (attr, (&code, &card)) in row.iter().zip(&self.static_cat_cardinalities).enumerate() {
                    if code >= card {
                        return Err(Error::Config(format!(
                            "static attribute {attr} of channel {c} is {code}, outside 0..{card}"
                        )));
                    }
                }
            }
        }
        if !self.static_continuous.is_empty() {
            let q = self.static_cont_features();
            if self.static_continuous.len() != self.channels
                || self.static_continuous.iter().any(|r| r.len() != q)
            {
                return Err(Error::Config(format!(
                    "static_continuous needs {} rows of equal length",
                    self.channels
                )));
            }
            if self.static_continuous.iter().flatten().any(|v| !v.is_finite()) {
                return Err(Error::Config("static_continuous holds a non-finite value".into()));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn patch_counts() {
        let mut c = ModelConfig::default();
        assert_eq!(c.patches(), 16);
        c.lookback = 96;
        assert_eq!(c.patches(), 3);
    }

    #[test]
    fn indivisible_lookback_needs_truncation() {
        let mut c = ModelConfig {
            patch_len: 33,
            stride: 33,
            ..ModelConfig::default()
        };
        assert!(c.validate().unwrap_err().is_validation());
        c.truncate_front = true;
        c.validate().unwrap();
        assert_eq!(c.patches(), 15);
        assert_eq!(c.dropped_steps(), 17);
    }

    #[test]
    fn static_attribute_range_is_checked() {
        let c = ModelConfig {
            channels: 2,
            static_cat_cardinalities: vec![3],
            static_categorical: vec![vec![0], vec![3]],
            ..ModelConfig::default()
        };
        let msg = c.validate().unwrap_err().to_string();
        assert!(msg.contains("attribute 0 of channel 1"), "{msg}");
    }

    #[test]
    fn variant_names_roundtrip() {
        for v in [Variant::TemporalOnly, Variant::PlusFm, Variant::Full] {
            assert_eq!(v.to_string().parse::<Variant>().unwrap(), v);
            let json = serde_json::to_string(&v).unwrap();
            assert_eq!(json, format!("\"{v}\""));
        }
    }
}
