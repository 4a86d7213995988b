use crate::error::{invalid, Error, Result};

/// Compares the analytic gradient returned by `f` at `params` against
/// central differences with step `eps`.
///
/// Returns the maximum over coordinates of `|a - n| / max(1, |a|, |n|)`.
pub fn grad_check<F>(f: F, params: &[f64], eps: f64) -> Result<f64>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    grad_check_coords(f, params, eps, None)
}

/// Like [`grad_check`] but only probes the listed coordinates.
pub fn grad_check_coords<F>(mut f: F, params: &[f64], eps: f64, coords: Option<&[usize]>) -> Result<f64>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    if !(eps > 0.0 && eps <= 1e-3) {
        return Err(invalid(format!("eps must lie in (0, 1e-3], got {}", eps)));
    }
    let (v0, analytic) = f(params)?;
    if !v0.is_finite() {
        return Err(Error::NonFinite("objective at base point".into()));
    }
    if analytic.len() != params.len() {
        return Err(crate::error::shape(format!(
            "gradient has {} entries for {} parameters",
            analytic.len(),
            params.len()
        )));
    }
    let all: Vec<usize>;
    let coords = match coords {
        Some(c) => c,
        None => {
            all = (0..params.len()).collect();
            &all
        }
    };
    let mut w = params.to_vec();
    let mut worst = 0.0f64;
    for &i in coords {
        let orig = w[i];
        w[i] = orig + eps;
        let (fp, _) = f(&w)?;
        w[i] = orig - eps;
        let (fm, _) = f(&w)?;
        w[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::NonFinite(format!("objective near coordinate {}", i)));
        }
        let num = (fp - fm) / (2.0 * eps);
        let a = analytic[i];
        let rel = (a - num).abs() / 1f64.max(a.abs()).max(num.abs());
        worst = worst.max(rel);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic() {
        let w = [0.3, -1.2, 4.0, 2.5];
        let err = grad_check(
            |p: &[f64]| Ok((p.iter().map(|x| x * x).sum(), p.iter().map(|x| 2.0 * x).collect())),
            &w,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn detects_wrong_gradient() {
        let err = grad_check(|p: &[f64]| Ok((p[0] * p[0], vec![p[0]])), &[2.0], 1e-5).unwrap();
        assert!(err > 0.1);
    }

    #[test]
    fn rejects_bad_eps_and_nan() {
        assert!(grad_check(|p: &[f64]| Ok((p[0], vec![1.0])), &[1.0], 0.1).is_err());
        assert!(grad_check(|_: &[f64]| Ok((f64::NAN, vec![1.0])), &[1.0], 1e-5).is_err());
    }
}
