use serde::{Deserialize, Serialize};

use super::{apply_corruption, render_eye, Corruption, CorruptionKind, Sample, SceneParams};
use super::{DEFAULT_FRAME_HEIGHT, DEFAULT_FRAME_WIDTH};
use crate::error::{invalid, Result};
use crate::par;
use crate::rng::Rng;

/// What to generate: frame size and the corruption mix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenSpec {
    pub height: usize,
    pub width: usize,
    /// Each sample picks one kind uniformly; empty means clean only.
    pub corruptions: Vec<CorruptionKind>,
    /// Probability that a sample stays clean even if kinds are listed.
    #[serde(default)]
    pub clean_fraction: f64,
    /// Severity drawn uniformly from `[lo, hi]`.
    pub severities: (f64, f64),
}

impl GenSpec {
    pub fn clean() -> Self {
        Self {
            height: DEFAULT_FRAME_HEIGHT,
            width: DEFAULT_FRAME_WIDTH,
            corruptions: Vec::new(),
            clean_fraction: 0.0,
            severities: (0.0, 0.0),
        }
    }

    pub fn mixed(corruptions: Vec<CorruptionKind>, severities: (f64, f64)) -> Self {
        Self {
            corruptions,
            severities,
            ..Self::clean()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.severities;
        if !(0.0 <= lo && lo <= hi && hi <= 1.0) {
            return Err(invalid(format!("severity range ({}, {}) must satisfy 0 <= lo <= hi <= 1", lo, hi)));
        }
        if !(0.0..=1.0).contains(&self.clean_fraction) {
            return Err(invalid("clean_fraction must lie in [0, 1]"));
        }
        Ok(())
    }
}

pub fn sample_id(index: usize) -> String {
    format!("s{:05}", index)
}

/// Sample `index` of the dataset seeded by `seed`. Depends only on
/// `(seed, index, spec)`, never on generation order.
pub fn generate_sample(seed: u64, index: usize, spec: &GenSpec) -> Result<Sample> {
    let mut rng = Rng::derive(seed, index as u64);
    let params = SceneParams::random(&mut rng, spec.height, spec.width);
    let clean = render_eye(&params, spec.height, spec.width, &mut rng, &sample_id(index))?;
    Ok(corrupt_draw(clean, spec, &mut rng)?.quantized())
}

/// `n_views` renderings of one scene (same geometry and intensities), each
/// with its own pixel noise and its own corruption draw from `spec`.
/// Ids are `g{scene}v{view}`.
pub fn generate_views(seed: u64, scene: usize, n_views: usize, spec: &GenSpec) -> Result<Vec<Sample>> {
    spec.validate()?;
    let mut scene_rng = Rng::derive(seed, scene as u64);
    let params = SceneParams::random(&mut scene_rng, spec.height, spec.width);
    (0..n_views)
        .map(|k| {
            let mut rng = Rng::derive(seed ^ VIEW_STREAM, (scene * n_views + k) as u64);
            let id = format!("g{:04}v{}", scene, k);
            let clean = render_eye(&params, spec.height, spec.width, &mut rng, &id)?;
            Ok(corrupt_draw(clean, spec, &mut rng)?.quantized())
        })
        .collect()
}

const VIEW_STREAM: u64 = 0x7615_0000_0000_0000;

fn corrupt_draw(clean: Sample, spec: &GenSpec, rng: &mut Rng) -> Result<Sample> {
    let pick_clean = rng.bernoulli(spec.clean_fraction);
    if spec.corruptions.is_empty() || pick_clean {
        return Ok(clean);
    }
    let kind = spec.corruptions[rng.below(spec.corruptions.len())];
    let severity = rng.uniform(spec.severities.0, spec.severities.1);
    apply_corruption(&clean, Corruption::new(kind, severity), rng)
}

pub fn generate_dataset(seed: u64, n: usize, spec: &GenSpec) -> Result<Vec<Sample>> {
    spec.validate()?;
    let idx: Vec<usize> = (0..n).collect();
    par::try_map(&idx, |&i| generate_sample(seed, i, spec))
}
