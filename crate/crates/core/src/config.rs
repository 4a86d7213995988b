//! Run configuration: one JSON file driving every command.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checkpoint::sha256_hex;
use crate::error::{invalid, Error, Result};
use crate::pipeline::{Detector, DEFAULT_MAX_SHIFT};
use crate::segnet::SegConfig;
use crate::synthgen::CorruptionKind;
use crate::uncertainty::{UncConfig, DEFAULT_EPS_FLOOR};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub lr: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Network input size `[H, W]`.
    pub crop: [usize; 2],
    pub latent_dim: usize,
    pub widths: [usize; 2],
    pub head_width: usize,
    pub seg: StageConfig,
    pub unc: StageConfig,
    pub eps_floor: f64,
    pub corruptions: Vec<CorruptionKind>,
    pub severities: [f64; 2],
    pub clean_fraction: f64,
    pub pcts: Vec<f64>,
    /// Rejection threshold on `s_unc`; `null` accepts everything.
    pub tau: Option<f64>,
    /// Gaze-fusion temperature; `null` means the interquartile range of
    /// clean-set scores.
    pub temperature: Option<f64>,
    pub max_shift: f64,
    pub train_detector: Detector,
}

impl Default for RunConfig {
    fn default() -> Self {
        let seg = SegConfig::default();
        let unc = UncConfig::default();
        Self {
            seed: 1,
            crop: [seg.height, seg.width],
            latent_dim: seg.latent_dim,
            widths: seg.widths,
            head_width: unc.head_width,
            seg: StageConfig {
                lr: seg.lr,
                momentum: seg.momentum,
                epochs: seg.epochs,
                batch_size: seg.batch_size,
            },
            unc: StageConfig {
                lr: unc.lr,
                momentum: unc.momentum,
                epochs: unc.epochs,
                batch_size: unc.batch_size,
            },
            eps_floor: DEFAULT_EPS_FLOOR,
            corruptions: CorruptionKind::ALL.to_vec(),
            severities: [0.0, 1.0],
            clean_fraction: 0.25,
            pcts: vec![1.0, 2.0, 3.0, 4.0, 5.0],
            tau: None,
            temperature: None,
            max_shift: DEFAULT_MAX_SHIFT,
            train_detector: Detector::GtJitter,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Format {
            what: "config".into(),
            detail: format!("line {} column {}: {}", e.line(), e.column(), e),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.is_file() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }

    /// SHA-256 of the canonical (compact) serialization.
    pub fn content_hash(&self) -> String {
        sha256_hex(serde_json::to_string(self).expect("config serializes").as_bytes())
    }

    pub fn seg_config(&self) -> SegConfig {
        SegConfig {
            height: self.crop[0],
            width: self.crop[1],
            latent_dim: self.latent_dim,
            widths: self.widths,
            lr: self.seg.lr,
            momentum: self.seg.momentum,
            epochs: self.seg.epochs,
            batch_size: self.seg.batch_size,
            seed: self.seed,
        }
    }

    pub fn unc_config(&self) -> UncConfig {
        UncConfig {
            head_width: self.head_width,
            eps_floor: self.eps_floor,
            lr: self.unc.lr,
            momentum: self.unc.momentum,
            epochs: self.unc.epochs,
            batch_size: self.unc.batch_size,
            seed: self.seed.wrapping_add(1),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.seg_config().validate()?;
        self.unc_config().validate()?;
        let [lo, hi] = self.severities;
        if !(0.0 <= lo && lo <= hi && hi <= 1.0) {
            return Err(invalid(format!("severities [{}, {}] must satisfy 0 <= lo <= hi <= 1", lo, hi)));
        }
        if !(0.0..=1.0).contains(&self.clean_fraction) {
            return Err(invalid("clean_fraction must lie in [0, 1]"));
        }
        if let Some(p) = self.pcts.iter().find(|p| !(0.0..100.0).contains(*p)) {
            return Err(invalid(format!("filter percentage {} outside [0, 100)", p)));
        }
        if let Some(t) = self.temperature {
            if !(t > 0.0) {
                return Err(invalid(format!("temperature must be positive, got {}", t)));
            }
        }
        if !(0.0..=0.25).contains(&self.max_shift) {
            return Err(invalid(format!("max_shift must lie in [0, 0.25], got {}", self.max_shift)));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let c = RunConfig::default();
        let back = RunConfig::from_json(&c.to_json()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.content_hash(), c.content_hash());
    }

    #[test]
    fn hash_tracks_content() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.seg.lr *= 2.0;
        assert_ne!(a.content_hash(), b.content_hash());
    }

    #[test]
    fn parse_errors_carry_location() {
        let err = RunConfig::from_json("{\n  \"seed\": 1,\n  oops\n}").unwrap_err().to_string();
        assert!(err.contains("line 3"), "{}", err);
    }

    #[test]
    fn missing_fields_take_defaults() {
        let c = RunConfig::from_json("{\"seed\": 9}").unwrap();
        assert_eq!(c.seed, 9);
        assert_eq!(c.seg, RunConfig::default().seg);
        assert!(RunConfig::from_json("{\"sed\": 9}").is_err());
    }

    #[test]
    fn invalid_values_rejected() {
        let mut c = RunConfig::default();
        c.latent_dim = 2;
        assert!(RunConfig::from_json(&c.to_json()).is_err());
        let mut c = RunConfig::default();
        c.severities = [0.5, 0.2];
        assert!(c.validate().is_err());
    }
}
