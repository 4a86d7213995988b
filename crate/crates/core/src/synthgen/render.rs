use serde::{Deserialize, Serialize};

use super::{Sample, SOURCE_DOMAIN};
use crate::detect::BBox;
use crate::error::{invalid, Result};
use crate::labels::{LabelMap, BACKGROUND, EYE, IRIS, PUPIL};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Mean gray level of each region.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Intensities {
    pub skin: f64,
    pub sclera: f64,
    pub iris: f64,
    pub pupil: f64,
}

/// Geometry of one rendered eye. Axes are (semi-major, semi-minor) in
/// pixels, the major axis horizontal before `rotation` is applied.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneParams {
    /// (row, col) of the eye ellipse centre.
    pub eye_center: (f64, f64),
    pub eye_axes: (f64, f64),
    pub iris_axes: (f64, f64),
    pub pupil_axes: (f64, f64),
    /// Iris/pupil centre relative to the eye centre, (row, col) in the
    /// unrotated eye frame. This is the gaze direction.
    pub iris_offset: (f64, f64),
    pub rotation: f64,
    pub intensities: Intensities,
    pub texture_seed: u64,
}

const PIXEL_NOISE: f64 = 0.012;
const TEXTURE_AMPLITUDE: f64 = 0.035;
const IRIS_GRAIN: f64 = 0.03;

/// Half extents (rows, cols) of an ellipse with semi-axes `(a, b)` rotated by
/// `theta`.
pub(crate) fn ellipse_half_extents(a: f64, b: f64, theta: f64) -> (f64, f64) {
    let (s, c) = theta.sin_cos();
    let hy = (a * a * s * s + b * b * c * c).sqrt();
    let hx = (a * a * c * c + b * b * s * s).sqrt();
    (hy, hx)
}

impl SceneParams {
    /// Eye spanning 54-70% of the frame width with a dilated pupil, a
    /// slightly off-centre iris and a small in-plane rotation.
    pub fn random(rng: &mut Rng, height: usize, width: usize) -> Self {
        let a = rng.uniform(0.27, 0.35) * width as f64;
        let b = a * rng.uniform(0.7, 0.8);
        let rotation = rng.uniform(-0.2, 0.2);
        let (hy, hx) = ellipse_half_extents(a, b, rotation);
        let margin = 0.1;
        let cy_lo = hy * (1.0 + margin) + 1.0;
        let cx_lo = hx * (1.0 + margin) + 1.0;
        let cy = rng.uniform(cy_lo, (height as f64 - cy_lo).max(cy_lo));
        let cx = rng.uniform(cx_lo, (width as f64 - cx_lo).max(cx_lo));
        let ri = b * rng.uniform(0.8, 0.92);
        let rp = b * rng.uniform(0.45, 0.55);
        let iris_axes = (ri, ri * rng.uniform(0.92, 1.0));
        let pupil_axes = (rp, rp * rng.uniform(0.92, 1.0));
        let iris_offset = (rng.uniform(-0.06, 0.06) * b, rng.uniform(-0.1, 0.1) * a);
        let intensities = Intensities {
            skin: rng.uniform(0.5, 0.65),
            sclera: rng.uniform(0.78, 0.9),
            iris: rng.uniform(0.3, 0.42),
            pupil: rng.uniform(0.04, 0.12),
        };
        Self {
            eye_center: (cy, cx),
            eye_axes: (a, b),
            iris_axes,
            pupil_axes,
            iris_offset,
            rotation,
            intensities,
            texture_seed: rng.next_u64(),
        }
    }

    /// Pupil centre in frame coordinates (row, col).
    pub fn pupil_center(&self) -> (f64, f64) {
        let (s, c) = self.rotation.sin_cos();
        let (ov, ou) = self.iris_offset;
        (
            self.eye_center.0 + ou * s + ov * c,
            self.eye_center.1 + ou * c - ov * s,
        )
    }

    /// Ground-truth box: the eye ellipse's bounding box with a 10% margin.
    pub fn eye_bbox(&self, height: usize, width: usize) -> BBox {
        let (hy, hx) = ellipse_half_extents(self.eye_axes.0, self.eye_axes.1, self.rotation);
        let (cy, cx) = self.eye_center;
        BBox::from_edges(cx - 1.1 * hx, cy - 1.1 * hy, cx + 1.1 * hx, cy + 1.1 * hy, height, width)
    }

    fn validate(&self, height: usize, width: usize) -> Result<()> {
        let lt = |x: (f64, f64), y: (f64, f64)| x.0 < y.0 && x.1 < y.1;
        if !(lt(self.pupil_axes, self.iris_axes) && lt(self.iris_axes, self.eye_axes)) {
            return Err(invalid(format!(
                "axes must nest pupil < iris < eye, got {:?} {:?} {:?}",
                self.pupil_axes, self.iris_axes, self.eye_axes
            )));
        }
        if self.pupil_axes.0 < 0.0 || self.pupil_axes.1 < 0.0 {
            return Err(invalid("negative pupil axes"));
        }
        let (hy, hx) = ellipse_half_extents(self.eye_axes.0, self.eye_axes.1, self.rotation);
        let (cy, cx) = self.eye_center;
        if cy - hy < 0.0 || cx - hx < 0.0 || cy + hy > height as f64 || cx + hx > width as f64 {
            return Err(invalid(format!(
                "eye ellipse centred at ({:.1}, {:.1}) with half extents ({:.1}, {:.1}) exceeds the {}x{} frame",
                cy, cx, hy, hx, height, width
            )));
        }
        Ok(())
    }
}

/// Smooth background texture: a sum of three oriented sinusoids.
struct Texture {
    waves: [(f64, f64, f64, f64); 3],
}

impl Texture {
    fn new(seed: u64) -> Self {
        let mut r = Rng::new(seed);
        let mut wave = || {
            let f = r.uniform(0.05, 0.25);
            let phi = r.uniform(0.0, std::f64::consts::PI);
            (f * phi.cos(), f * phi.sin(), r.uniform(0.0, std::f64::consts::TAU), r.uniform(0.5, 1.0))
        };
        Self {
            waves: [wave(), wave(), wave()],
        }
    }

    fn at(&self, y: f64, x: f64) -> f64 {
        self.waves.iter().map(|&(fx, fy, ph, amp)| amp * (fx * x + fy * y + ph).sin()).sum::<f64>() / 3.0
    }
}

/// Rasterizes nested rotated ellipses. A pixel takes the label of the
/// innermost region containing its centre; the iris and pupil are clipped
/// to the eye opening.
pub fn render_eye(params: &SceneParams, height: usize, width: usize, rng: &mut Rng, sample_id: &str) -> Result<Sample> {
    if height < 64 || width < 64 {
        return Err(invalid(format!("frame must be at least 64x64, got {}x{}", height, width)));
    }
    params.validate(height, width)?;

    let (s, c) = params.rotation.sin_cos();
    let (cy, cx) = params.eye_center;
    let (a, b) = params.eye_axes;
    let (ai, bi) = params.iris_axes;
    let (ap, bp) = params.pupil_axes;
    let (ov, ou) = params.iris_offset;
    let tex = Texture::new(params.texture_seed);
    let it = params.intensities;

    let mut labels = LabelMap::filled(height, width, BACKGROUND);
    let mut image = Vec::with_capacity(height * width);
    for row in 0..height {
        for col in 0..width {
            let dy = row as f64 + 0.5 - cy;
            let dx = col as f64 + 0.5 - cx;
            let u = dx * c + dy * s;
            let v = -dx * s + dy * c;
            let in_eye = (u / a).powi(2) + (v / b).powi(2) <= 1.0;
            let (iu, iv) = (u - ou, v - ov);
            let in_iris = in_eye && (iu / ai).powi(2) + (iv / bi).powi(2) <= 1.0;
            let in_pupil = in_iris && ap > 0.0 && bp > 0.0 && (iu / ap).powi(2) + (iv / bp).powi(2) <= 1.0;
            let (label, base) = if in_pupil {
                (PUPIL, it.pupil)
            } else if in_iris {
                (IRIS, it.iris + IRIS_GRAIN * rng.normal())
            } else if in_eye {
                (EYE, it.sclera)
            } else {
                (BACKGROUND, it.skin + TEXTURE_AMPLITUDE * tex.at(row as f64, col as f64))
            };
            labels.set(row, col, label);
            image.push((base + PIXEL_NOISE * rng.normal()).clamp(0.0, 1.0));
        }
    }

    Ok(Sample {
        sample_id: sample_id.to_string(),
        image: Tensor::new(vec![height, width], image)?,
        labels,
        gt_bbox: params.eye_bbox(height, width),
        severity: 0.0,
        corruption: None,
        domain_id: SOURCE_DOMAIN.to_string(),
    })
}
