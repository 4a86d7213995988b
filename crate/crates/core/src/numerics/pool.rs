//! 2x2 average pooling and nearest-neighbour 2x upsampling.
//!
//! The two are adjoint up to a factor of 4:
//! `<pool2x(x), y> = <x, upsample2x(y)> / 4`, so `pool2x_backward` is
//! `upsample2x(g) / 4` and `upsample2x_backward` is `4 * pool2x(g)`.

use crate::error::{invalid, Result};
use crate::tensor::Tensor;

pub fn pool2x(x: &Tensor) -> Result<Tensor> {
    let (c, h, w) = x.chw()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(invalid(format!("pool2x needs even spatial dims, got {}x{}", h, w)));
    }
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Tensor::zeros(&[c, ho, wo]);
    for ch in 0..c {
        let src = x.channel(ch);
        let dst = out.channel_mut(ch);
        for y in 0..ho {
            let r0 = &src[2 * y * w..2 * y * w + w];
            let r1 = &src[(2 * y + 1) * w..(2 * y + 1) * w + w];
            for xx in 0..wo {
                dst[y * wo + xx] = 0.25 * (r0[2 * xx] + r0[2 * xx + 1] + r1[2 * xx] + r1[2 * xx + 1]);
            }
        }
    }
    Ok(out)
}

pub fn upsample2x(x: &Tensor) -> Result<Tensor> {
    let (c, h, w) = x.chw()?;
    let wo = 2 * w;
    let mut out = Tensor::zeros(&[c, 2 * h, wo]);
    for ch in 0..c {
        let src = x.channel(ch);
        let dst = out.channel_mut(ch);
        for y in 0..2 * h {
            let row = &src[(y / 2) * w..(y / 2) * w + w];
            for (xx, v) in dst[y * wo..(y + 1) * wo].iter_mut().enumerate() {
                *v = row[xx / 2];
            }
        }
    }
    Ok(out)
}

/// Gradient of [`pool2x`] with respect to its input.
pub fn pool2x_backward(grad_out: &Tensor) -> Result<Tensor> {
    let mut g = upsample2x(grad_out)?;
    g.scale(0.25);
    Ok(g)
}

/// Gradient of [`upsample2x`] with respect to its input.
pub fn upsample2x_backward(grad_out: &Tensor) -> Result<Tensor> {
    let mut g = pool2x(grad_out)?;
    g.scale(4.0);
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::grad_check;
    use crate::rng::Rng;

    #[test]
    fn pool_mean() {
        let x = Tensor::new(vec![1, 2, 2], vec![1.0, 3.0, 5.0, 7.0]).unwrap();
        assert_eq!(pool2x(&x).unwrap().data(), &[4.0]);
    }

    #[test]
    fn constant_images_stay_constant() {
        let x = Tensor::full(&[2, 4, 6], 0.3);
        assert!(pool2x(&x).unwrap().data().iter().all(|&v| (v - 0.3).abs() < 1e-15));
        assert!(upsample2x(&x).unwrap().data().iter().all(|&v| v == 0.3));
    }

    #[test]
    fn odd_dims_rejected() {
        assert!(pool2x(&Tensor::zeros(&[1, 3, 4])).is_err());
    }

    #[test]
    fn adjoint_identity() {
        let mut r = Rng::new(1);
        let x = Tensor::from_fn(&[1, 8, 8], |_| r.normal());
        let y = Tensor::from_fn(&[1, 4, 4], |_| r.normal());
        let lhs: f64 = pool2x(&x).unwrap().data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(upsample2x(&y).unwrap().data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs / 4.0).abs() < 1e-12);
    }

    #[test]
    fn up_of_pool_gradient_matches_finite_differences() {
        let mut r = Rng::new(2);
        let x = Tensor::from_fn(&[1, 8, 8], |_| r.normal());
        let g = Tensor::from_fn(&[1, 8, 8], |_| r.normal());
        let err = grad_check(
            |p: &[f64]| {
                let t = Tensor::new(vec![1, 8, 8], p.to_vec()).unwrap();
                let y = upsample2x(&pool2x(&t)?)?;
                let v: f64 = y.data().iter().zip(g.data()).map(|(a, b)| a * b).sum();
                let gi = pool2x_backward(&upsample2x_backward(&g)?)?;
                Ok((v, gi.into_data()))
            },
            x.data(),
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }
}
