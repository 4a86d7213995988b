//! Segmentation metrics, uncertainty-based filtering, accept/reject decisions
//! and uncertainty-weighted gaze fusion.

mod filter;
mod gaze;
mod metrics;
mod report;

pub use filter::{dropped_count, percentile, rank_and_filter, spearman, threshold_decision, Decision, FilterResult, ScoredImage};
pub use gaze::{average_gaze, fuse_gaze, fusion_weights, gaze_error, pupil_centroid, GazeSample};
pub use metrics::{metrics, Confusion, Metrics};
pub use report::{evaluate_setting, filtering_csv, PerImage, Report, SettingResult, Tables};
