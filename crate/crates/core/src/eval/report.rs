use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

use super::{rank_and_filter, Confusion, FilterResult, Metrics, ScoredImage};

/// Per-image row of the evaluation report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerImage {
    pub sample_id: String,
    pub s_unc: f64,
    pub severity: f64,
    pub corruption: String,
    pub metrics: Metrics,
}

/// One evaluated pipeline: overall metrics and its filtering curve.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SettingResult {
    pub overall: Metrics,
    pub filtering: Vec<FilterResult>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tables {
    pub filtering: Vec<FilterResult>,
    pub ablations: BTreeMap<String, SettingResult>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub config_hash: String,
    pub overall: Metrics,
    pub per_image: Vec<PerImage>,
    pub tables: Tables,
}

/// Overall metrics and the filtering curve (with the unfiltered point at
/// 0% prepended) for one set of scored images.
pub fn evaluate_setting(images: &[ScoredImage], pcts: &[f64]) -> Result<SettingResult> {
    if images.is_empty() {
        return Err(invalid("nothing to evaluate"));
    }
    let mut all = Confusion::default();
    for img in images {
        all.merge(&img.confusion);
    }
    let mut with_zero = vec![0.0];
    with_zero.extend(pcts.iter().copied().filter(|&p| p != 0.0));
    Ok(SettingResult {
        overall: all.metrics(),
        filtering: rank_and_filter(images, &with_zero)?,
    })
}

/// Table of retained MIoU: one row per setting, one column per threshold.
pub fn filtering_csv(main: &SettingResult, ablations: &BTreeMap<String, SettingResult>) -> String {
    let mut out = String::from("setting");
    for f in &main.filtering {
        let _ = write!(out, ",{}%", f.threshold_pct);
    }
    out.push('\n');
    let mut row = |name: &str, r: &SettingResult| {
        out.push_str(name);
        for f in &r.filtering {
            let _ = write!(out, ",{}", f.retained_miou);
        }
        out.push('\n');
    };
    row("main", main);
    for (name, r) in ablations {
        row(name, r);
    }
    out
}
