use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{Sample, SHIFTED_DOMAIN};
use crate::error::{invalid, Error, Result};
use crate::labels::BACKGROUND;
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionKind {
    Blur,
    Occlusion,
    DomainShift,
}

impl CorruptionKind {
    pub const ALL: [CorruptionKind; 3] = [CorruptionKind::Blur, CorruptionKind::Occlusion, CorruptionKind::DomainShift];

    pub fn as_str(&self) -> &'static str {
        match self {
            CorruptionKind::Blur => "blur",
            CorruptionKind::Occlusion => "occlusion",
            CorruptionKind::DomainShift => "domain_shift",
        }
    }
}

impl fmt::Display for CorruptionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CorruptionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "blur" => Ok(Self::Blur),
            "occlusion" => Ok(Self::Occlusion),
            "domain_shift" | "domain-shift" => Ok(Self::DomainShift),
            other => Err(invalid(format!(
                "unknown corruption kind '{}' (expected blur, occlusion or domain_shift)",
                other
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Corruption {
    pub kind: CorruptionKind,
    pub severity: f64,
}

impl Corruption {
    pub fn new(kind: CorruptionKind, severity: f64) -> Self {
        Self { kind, severity }
    }
}

/// Applies one corruption. Severity 0 returns the sample unchanged.
pub fn apply_corruption(sample: &Sample, c: Corruption, rng: &mut Rng) -> Result<Sample> {
    if !(0.0..=1.0).contains(&c.severity) {
        return Err(invalid(format!("severity must lie in [0, 1], got {}", c.severity)));
    }
    let mut out = sample.clone();
    if c.severity == 0.0 {
        return Ok(out);
    }
    match c.kind {
        CorruptionKind::Blur => {
            let angle = rng.uniform(0.0, std::f64::consts::PI);
            let len = 1 + (14.0 * c.severity).round() as usize;
            out.image = motion_blur(&sample.image, &motion_blur_taps(len, angle))?;
        }
        CorruptionKind::Occlusion => occlude(&mut out, c.severity, rng)?,
        CorruptionKind::DomainShift => {
            domain_shift(&mut out.image, c.severity, rng)?;
            out.domain_id = SHIFTED_DOMAIN.to_string();
        }
    }
    out.severity = c.severity;
    out.corruption = Some(c.kind);
    Ok(out)
}

/// `len` distinct pixel offsets (dy, dx) along a digital line at `angle`.
///
/// The dominant axis advances by one pixel per tap, so no two taps share a
/// pixel.
pub fn motion_blur_taps(len: usize, angle: f64) -> Vec<(isize, isize)> {
    let (s, c) = angle.sin_cos();
    let half = (len as isize - 1) / 2;
    (0..len as isize)
        .map(|k| {
            let step = k - half;
            if c.abs() >= s.abs() {
                let dx = step * c.signum() as isize;
                let dy = (step as f64 * s / c.abs()).round() as isize;
                (dy, dx)
            } else {
                let dy = step * s.signum() as isize;
                let dx = (step as f64 * c / s.abs()).round() as isize;
                (dy, dx)
            }
        })
        .collect()
}

/// Averages the image over `taps`, replicating edge pixels.
fn motion_blur(image: &Tensor, taps: &[(isize, isize)]) -> Result<Tensor> {
    let (h, w) = image.hw()?;
    let src = image.data();
    let inv = 1.0 / taps.len() as f64;
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h as isize {
        for x in 0..w as isize {
            let mut acc = 0.0;
            for &(dy, dx) in taps {
                let sy = (y + dy).clamp(0, h as isize - 1) as usize;
                let sx = (x + dx).clamp(0, w as isize - 1) as usize;
                acc += src[sy * w + sx];
            }
            out.push(acc * inv);
        }
    }
    Tensor::new(vec![h, w], out)
}

/// Upper eyelid drawn down over the eye box.
///
/// The lid margin sits at depth `severity * h * (0.6 - 0.1 u^2)` below the
/// box top, `u` the normalized horizontal position in `[-1, 1]`; at full
/// severity it reaches at least half the box height everywhere. Covered
/// eye pixels become background, painted at the median skin level, with a
/// dark lash band along the margin. Visible eye pixels below the margin are
/// darkened by a lid shadow of strength `0.5 * severity` decaying over
/// `0.15 * h` rows.
fn occlude(sample: &mut Sample, severity: f64, rng: &mut Rng) -> Result<()> {
    let (h, w) = sample.image.hw()?;
    let skin = median_background(sample);
    let b = sample.gt_bbox;
    let half_w = b.w as f64 / 2.0;
    let xc = b.l as f64 + half_w;
    let data = sample.image.data_mut();
    for row in b.t..b.bottom().min(h) {
        for col in b.l..b.right().min(w) {
            if sample.labels.get(row, col) == BACKGROUND {
                continue;
            }
            let u = ((col as f64 + 0.5 - xc) / half_w).clamp(-1.0, 1.0);
            let edge = b.t as f64 + severity * b.h as f64 * (0.6 - 0.1 * u * u);
            let y = row as f64 + 0.5;
            if y < edge {
                let lash = edge - y < 2.0;
                let level = if lash { 0.18 } else { skin };
                data[row * w + col] = (level + 0.012 * rng.normal()).clamp(0.0, 1.0);
                sample.labels.set(row, col, BACKGROUND);
            } else {
                let shade = 1.0 - 0.5 * severity * (-(y - edge) / (0.15 * b.h as f64)).exp();
                data[row * w + col] *= shade;
            }
        }
    }
    Ok(())
}

fn median_background(sample: &Sample) -> f64 {
    let mut vals: Vec<f64> = sample
        .image
        .data()
        .iter()
        .zip(&sample.labels.data)
        .filter(|(_, &l)| l == BACKGROUND)
        .map(|(&v, _)| v)
        .collect();
    if vals.is_empty() {
        return 0.6;
    }
    vals.sort_by(f64::total_cmp);
    vals[vals.len() / 2]
}

/// Gamma, contrast, vignette and additive noise, in that order.
fn domain_shift(image: &mut Tensor, severity: f64, rng: &mut Rng) -> Result<()> {
    let (h, w) = image.hw()?;
    let gamma = rng.uniform(1.0 - 0.6 * severity, 1.0 + 0.6 * severity);
    let contrast = rng.uniform(1.0 - 0.5 * severity, 1.0 + 0.25 * severity);
    let sigma = 0.08 * severity;
    let (cy, cx) = (h as f64 / 2.0, w as f64 / 2.0);
    let r2max = cy * cy + cx * cx;
    for row in 0..h {
        for col in 0..w {
            let v = &mut image.data_mut()[row * w + col];
            let g = v.max(0.0).powf(gamma);
            let dy = row as f64 + 0.5 - cy;
            let dx = col as f64 + 0.5 - cx;
            let vignette = 1.0 - 0.4 * severity * (dy * dy + dx * dx) / r2max;
            let shifted = (0.5 + contrast * (g - 0.5)) * vignette + sigma * rng.normal();
            *v = shifted.clamp(0.0, 1.0);
        }
    }
    Ok(())
}
