use crate::error::{invalid, Result};
use crate::tensor::Tensor;

/// Max-subtracted softmax over a slice, in place.
#[inline]
pub fn softmax_in_place(v: &mut [f64]) {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for x in v.iter_mut() {
        *x = (*x - m).exp();
        s += *x;
    }
    for x in v.iter_mut() {
        *x /= s;
    }
}

pub fn softmax_vec(logits: &Tensor) -> Result<Tensor> {
    if logits.rank() != 1 || logits.len() < 2 {
        return Err(invalid(format!(
            "softmax_vec needs a vector of length >= 2, got shape {:?}",
            logits.shape()
        )));
    }
    let mut out = logits.clone();
    softmax_in_place(out.data_mut());
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sm(v: &[f64]) -> Vec<f64> {
        softmax_vec(&Tensor::new(vec![v.len()], v.to_vec()).unwrap())
            .unwrap()
            .into_data()
    }

    #[test]
    fn uniform_and_analytic() {
        assert_eq!(sm(&[0.0; 4]), vec![0.25; 4]);
        let p = sm(&[3f64.ln(), 0.0]);
        assert!((p[0] - 0.75).abs() < 1e-15 && (p[1] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn rejects_scalars() {
        assert!(softmax_vec(&Tensor::new(vec![1], vec![1.0]).unwrap()).is_err());
    }

    proptest! {
        #[test]
        fn sums_to_one_and_shift_invariant(
            v in prop::collection::vec(-30.0f64..30.0, 2..8),
            c in -100.0f64..100.0,
        ) {
            let p = sm(&v);
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(p.iter().all(|&x| x > 0.0));
            let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
            for (a, b) in p.iter().zip(sm(&shifted)) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
