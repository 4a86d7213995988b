use std::f64::consts::PI;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape, Error, Result};
use crate::labels::{LabelMap, NUM_CLASSES};
use crate::tensor::Tensor;

use super::DiagCovMap;

/// Which objective trains the head.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Original,
    Surrogate,
}

impl std::str::FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "original" => Ok(LossKind::Original),
            "surrogate" => Ok(LossKind::Surrogate),
            other => Err(invalid(format!("unknown loss '{}' (original|surrogate)", other))),
        }
    }
}

impl std::fmt::Display for LossKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            LossKind::Original => "original",
            LossKind::Surrogate => "surrogate",
        })
    }
}

/// Squared residuals `(c_y - z) ⊙ (c_y - z)` per pixel, laid out `[D, H, W]`.
pub fn residual_targets(z: &Tensor, labels: &LabelMap, centers: &Tensor) -> Result<Tensor> {
    let (d, h, w) = z.chw()?;
    if (labels.height, labels.width) != (h, w) {
        return Err(shape(format!(
            "labels are {}x{} but latent map is {}x{}",
            labels.height, labels.width, h, w
        )));
    }
    if centers.shape() != [NUM_CLASSES, d] {
        return Err(shape(format!(
            "class centers have shape {:?}, expected [{}, {}]",
            centers.shape(),
            NUM_CLASSES,
            d
        )));
    }
    let plane = h * w;
    let mut out = Tensor::zeros(&[d, h, w]);
    let zc = z.data();
    let c = centers.data();
    let o = out.data_mut();
    for p in 0..plane {
        let y = labels.data[p] as usize;
        if y >= NUM_CLASSES {
            return Err(invalid(format!("label value {} outside {{0,1,2,3}}", y)));
        }
        for k in 0..d {
            let v = c[y * d + k] - zc[k * plane + p];
            o[k * plane + p] = v * v;
        }
    }
    Ok(out)
}

fn check_cov(cov: &DiagCovMap, target: &Tensor) -> Result<usize> {
    if cov.0.shape() != target.shape() {
        return Err(shape(format!(
            "covariance map {:?} does not match latent map {:?}",
            cov.0.shape(),
            target.shape()
        )));
    }
    let (_, h, w) = target.chw()?;
    Ok(h * w)
}

/// Per-pixel mean of `½ Σ v²/σ² + ½ Σ ln σ² + (D/2) ln 2π` and its
/// gradient with respect to every variance.
pub fn original_loss_grad(cov: &DiagCovMap, target: &Tensor) -> Result<(f64, Tensor)> {
    let plane = check_cov(cov, target)?;
    let d = target.shape()[0];
    if let Some(&bad) = cov.0.data().iter().find(|&&s| !(s > 0.0)) {
        return Err(invalid(format!("variance must be positive, got {}", bad)));
    }
    let inv = 1.0 / plane as f64;
    let mut total = 0.0;
    let mut grad = Tensor::zeros(cov.0.shape());
    for ((g, &s), &v2) in grad.data_mut().iter_mut().zip(cov.0.data()).zip(target.data()) {
        total += 0.5 * (v2 / s + s.ln());
        *g = 0.5 * (1.0 / s - v2 / (s * s)) * inv;
    }
    let loss = total * inv + 0.5 * d as f64 * (2.0 * PI).ln();
    Ok((loss, grad))
}

/// Per-pixel mean of `‖σ² − v⊙v‖²` and its gradient.
pub fn surrogate_loss_grad(cov: &DiagCovMap, target: &Tensor) -> Result<(f64, Tensor)> {
    let plane = check_cov(cov, target)?;
    let inv = 1.0 / plane as f64;
    let mut total = 0.0;
    let mut grad = Tensor::zeros(cov.0.shape());
    for ((g, &s), &v2) in grad.data_mut().iter_mut().zip(cov.0.data()).zip(target.data()) {
        let r = s - v2;
        total += r * r;
        *g = 2.0 * r * inv;
    }
    Ok((total * inv, grad))
}

pub fn loss_grad(kind: LossKind, cov: &DiagCovMap, target: &Tensor) -> Result<(f64, Tensor)> {
    match kind {
        LossKind::Original => original_loss_grad(cov, target),
        LossKind::Surrogate => surrogate_loss_grad(cov, target),
    }
}

pub fn original_loss(cov: &DiagCovMap, z: &Tensor, labels: &LabelMap, centers: &Tensor) -> Result<f64> {
    Ok(original_loss_grad(cov, &residual_targets(z, labels, centers)?)?.0)
}

pub fn surrogate_loss(cov: &DiagCovMap, z: &Tensor, labels: &LabelMap, centers: &Tensor) -> Result<f64> {
    Ok(surrogate_loss_grad(cov, &residual_targets(z, labels, centers)?)?.0)
}

/// Closed-form minimizer of the per-pixel prior/posterior cross-entropy:
/// `σ²_d = v_d²`, whose trace is `‖v‖²`.
pub fn optimal_cov_oracle(v: &[f64]) -> Vec<f64> {
    v.iter().map(|x| x * x).collect()
}

/// `vᵀ Λ*⁻¹ v` at `Λ* = diag(v ⊙ v)`, which equals the dimension `D`.
pub fn quad_form_trace_check(v: &[f64]) -> Result<f64> {
    if let Some(i) = v.iter().position(|&x| x == 0.0) {
        return Err(invalid(format!("v[{}] = 0 makes the optimal covariance singular", i)));
    }
    let lambda = optimal_cov_oracle(v);
    Ok(v.iter().zip(&lambda).map(|(x, l)| x * x / l).sum())
}

/// Gradient norms of both single-pixel losses with respect to `diag(Λ)`
/// at `Λ = scale · I`: `(original, surrogate)`.
pub fn grad_vanishing_probe(v: &[f64], scale: f64) -> Result<(f64, f64)> {
    if !(scale > 0.0) {
        return Err(invalid(format!("scale must be positive, got {}", scale)));
    }
    Ok(single_pixel_grad_norms(v, &vec![scale; v.len()]))
}

fn single_pixel_grad_norms(v: &[f64], sigma2: &[f64]) -> (f64, f64) {
    let (mut o, mut s) = (0.0, 0.0);
    for (&x, &w) in v.iter().zip(sigma2) {
        let v2 = x * x;
        let go = 0.5 * (1.0 / w - v2 / (w * w));
        let gs = 2.0 * (w - v2);
        o += go * go;
        s += gs * gs;
    }
    (o.sqrt(), s.sqrt())
}

/// Summand of the original loss for one pixel.
pub fn original_summand(v: &[f64], sigma2: &[f64]) -> f64 {
    let d = v.len() as f64;
    v.iter()
        .zip(sigma2)
        .map(|(&x, &w)| 0.5 * (x * x / w + w.ln()))
        .sum::<f64>()
        + 0.5 * d * (2.0 * PI).ln()
}

pub fn surrogate_summand(v: &[f64], sigma2: &[f64]) -> f64 {
    v.iter().zip(sigma2).map(|(&x, &w)| (w - x * x).powi(2)).sum()
}

/// Image-level uncertainty: `Σ_pixels Σ_d ln σ²`.
pub fn unc_score(cov: &DiagCovMap) -> f64 {
    cov.0.data().iter().map(|s| s.ln()).sum()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LandscapeRow {
    pub w1: f64,
    pub w2: f64,
    pub orig_loss: f64,
    pub orig_gnorm: f64,
    pub surr_loss: f64,
    pub surr_gnorm: f64,
}

/// Both losses and gradient norms over an `n x n` grid of the two diagonal
/// variances, evenly spaced on `[lo, hi]`. Rows are ordered `w1`-major.
pub fn landscape_grid(v: [f64; 2], range: (f64, f64), n: usize) -> Result<Vec<LandscapeRow>> {
    let (lo, hi) = range;
    if !(lo > 0.0 && hi > lo && hi.is_finite()) {
        return Err(invalid(format!("range must satisfy 0 < lo < hi, got ({}, {})", lo, hi)));
    }
    if n < 10 {
        return Err(invalid(format!("grid needs n >= 10, got {}", n)));
    }
    let at = |i: usize| lo + (hi - lo) * i as f64 / (n - 1) as f64;
    let mut rows = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            let s = [at(i), at(j)];
            let (orig_gnorm, surr_gnorm) = single_pixel_grad_norms(&v, &s);
            rows.push(LandscapeRow {
                w1: s[0],
                w2: s[1],
                orig_loss: original_summand(&v, &s),
                orig_gnorm,
                surr_loss: surrogate_summand(&v, &s),
                surr_gnorm,
            });
        }
    }
    Ok(rows)
}

pub fn landscape_csv(rows: &[LandscapeRow]) -> String {
    let mut out = String::from("w1,w2,orig_loss,orig_gnorm,surr_loss,surr_gnorm\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            r.w1, r.w2, r.orig_loss, r.orig_gnorm, r.surr_loss, r.surr_gnorm
        );
    }
    out
}
