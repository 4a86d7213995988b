//! Same-size 2-D cross-correlation with zero padding.

use crate::error::{invalid, shape, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[inline]
fn axpy(dst: &mut [f64], src: &[f64], a: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += a * s;
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Valid output range `[lo, hi)` along one axis for tap offset `off`.
#[inline]
fn span(n: usize, off: isize) -> (usize, usize) {
    let lo = (-off).max(0) as usize;
    let hi = (n as isize - off).clamp(0, n as isize) as usize;
    (lo, hi.max(lo))
}

fn check_shapes(input: &Tensor, kernel: &Tensor, pad: usize) -> Result<(usize, usize, usize, usize, usize)> {
    let (cin, h, w) = input.chw()?;
    let (cout, kcin, k, k2) = match kernel.shape()[..] {
        [a, b, c, d] => (a, b, c, d),
        _ => {
            return Err(shape(format!(
                "kernel must be [C_out, C_in, k, k], got {:?}",
                kernel.shape()
            )))
        }
    };
    if kcin != cin {
        return Err(shape(format!(
            "kernel expects C_in={} but input has {} channels",
            kcin, cin
        )));
    }
    if k != k2 || k % 2 == 0 {
        return Err(invalid(format!("kernel must be square and odd, got {}x{}", k, k2)));
    }
    if pad != (k - 1) / 2 {
        return Err(invalid(format!(
            "pad must be (k-1)/2 = {} for same-size output, got {}",
            (k - 1) / 2,
            pad
        )));
    }
    Ok((cin, cout, h, w, k))
}

/// `out[o] = sum_i corr(input[i], kernel[o, i])`.
pub fn conv2d(input: &Tensor, kernel: &Tensor, pad: usize) -> Result<Tensor> {
    let (cin, cout, h, w, k) = check_shapes(input, kernel, pad)?;
    let mut out = Tensor::zeros(&[cout, h, w]);
    let kd = kernel.data();
    let plane = h * w;
    for o in 0..cout {
        let dst = &mut out.data_mut()[o * plane..(o + 1) * plane];
        for i in 0..cin {
            let src = input.channel(i);
            let taps = &kd[(o * cin + i) * k * k..(o * cin + i + 1) * k * k];
            corr_plane(dst, src, h, w, k, pad, taps);
        }
    }
    Ok(out)
}

fn corr_plane(dst: &mut [f64], src: &[f64], h: usize, w: usize, k: usize, pad: usize, taps: &[f64]) {
    for ky in 0..k {
        let dy = ky as isize - pad as isize;
        let (y0, y1) = span(h, dy);
        for kx in 0..k {
            let wv = taps[ky * k + kx];
            if wv == 0.0 {
                continue;
            }
            let dx = kx as isize - pad as isize;
            let (x0, x1) = span(w, dx);
            for y in y0..y1 {
                let iy = (y as isize + dy) as usize;
                let sx0 = (x0 as isize + dx) as usize;
                axpy(
                    &mut dst[y * w + x0..y * w + x1],
                    &src[iy * w + sx0..iy * w + sx0 + (x1 - x0)],
                    wv,
                );
            }
        }
    }
}

/// Returns `(grad_input, grad_kernel)`.
pub fn conv2d_backward(
    input: &Tensor,
    kernel: &Tensor,
    grad_out: &Tensor,
    pad: usize,
) -> Result<(Tensor, Tensor)> {
    let gk = conv2d_grad_kernel(input, kernel, grad_out, pad)?;
    let gi = conv2d_grad_input(input, kernel, grad_out, pad)?;
    Ok((gi, gk))
}

fn check_grad_out(grad_out: &Tensor, cout: usize, h: usize, w: usize) -> Result<()> {
    if grad_out.shape() != [cout, h, w] {
        return Err(shape(format!(
            "grad_out must be [{}, {}, {}], got {:?}",
            cout,
            h,
            w,
            grad_out.shape()
        )));
    }
    Ok(())
}

pub fn conv2d_grad_input(input: &Tensor, kernel: &Tensor, grad_out: &Tensor, pad: usize) -> Result<Tensor> {
    let (cin, cout, h, w, k) = check_shapes(input, kernel, pad)?;
    check_grad_out(grad_out, cout, h, w)?;
    let mut gi = Tensor::zeros(&[cin, h, w]);
    let kd = kernel.data();
    let plane = h * w;
    for i in 0..cin {
        let dst = &mut gi.data_mut()[i * plane..(i + 1) * plane];
        for o in 0..cout {
            let g = grad_out.channel(o);
            let taps = &kd[(o * cin + i) * k * k..(o * cin + i + 1) * k * k];
            for ky in 0..k {
                let dy = ky as isize - pad as isize;
                let (y0, y1) = span(h, dy);
                for kx in 0..k {
                    let wv = taps[ky * k + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    let dx = kx as isize - pad as isize;
                    let (x0, x1) = span(w, dx);
                    for y in y0..y1 {
                        let iy = (y as isize + dy) as usize;
                        let sx0 = (x0 as isize + dx) as usize;
                        axpy(
                            &mut dst[iy * w + sx0..iy * w + sx0 + (x1 - x0)],
                            &g[y * w + x0..y * w + x1],
                            wv,
                        );
                    }
                }
            }
        }
    }
    Ok(gi)
}

pub fn conv2d_grad_kernel(input: &Tensor, kernel: &Tensor, grad_out: &Tensor, pad: usize) -> Result<Tensor> {
    let (cin, cout, h, w, k) = check_shapes(input, kernel, pad)?;
    check_grad_out(grad_out, cout, h, w)?;
    let mut gk = Tensor::zeros(kernel.shape());
    for o in 0..cout {
        let g = grad_out.channel(o);
        for i in 0..cin {
            let src = input.channel(i);
            for ky in 0..k {
                let dy = ky as isize - pad as isize;
                let (y0, y1) = span(h, dy);
                for kx in 0..k {
                    let dx = kx as isize - pad as isize;
                    let (x0, x1) = span(w, dx);
                    let mut acc = 0.0;
                    for y in y0..y1 {
                        let iy = (y as isize + dy) as usize;
                        let sx0 = (x0 as isize + dx) as usize;
                        acc += dot(&src[iy * w + sx0..iy * w + sx0 + (x1 - x0)], &g[y * w + x0..y * w + x1]);
                    }
                    gk.data_mut()[((o * cin + i) * k + ky) * k + kx] = acc;
                }
            }
        }
    }
    Ok(gk)
}

/// A 3x3 (or any odd size) same-padding convolution with a per-channel bias.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d {
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Clone, Debug)]
pub struct ConvGrads {
    pub input: Option<Tensor>,
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Conv2d {
    pub fn zeros(cin: usize, cout: usize, k: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[cout, cin, k, k]),
            bias: Tensor::zeros(&[cout]),
        }
    }

    /// He (fan-in) normal initialization, zero bias.
    pub fn he(cin: usize, cout: usize, k: usize, rng: &mut Rng) -> Self {
        let std = (2.0 / (cin * k * k) as f64).sqrt();
        Self {
            weight: Tensor::from_fn(&[cout, cin, k, k], |_| std * rng.normal()),
            bias: Tensor::zeros(&[cout]),
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn kernel_size(&self) -> usize {
        self.weight.shape()[2]
    }

    fn pad(&self) -> usize {
        (self.kernel_size() - 1) / 2
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut out = conv2d(x, &self.weight, self.pad())?;
        for (o, &b) in self.bias.data().iter().enumerate() {
            if b != 0.0 {
                for v in out.channel_mut(o) {
                    *v += b;
                }
            }
        }
        Ok(out)
    }

    pub fn backward(&self, x: &Tensor, grad_out: &Tensor, need_input: bool) -> Result<ConvGrads> {
        let weight = conv2d_grad_kernel(x, &self.weight, grad_out, self.pad())?;
        let bias = Tensor::from_fn(&[self.out_channels()], |o| grad_out.channel(o).iter().sum());
        let input = if need_input {
            Some(conv2d_grad_input(x, &self.weight, grad_out, self.pad())?)
        } else {
            None
        };
        Ok(ConvGrads { input, weight, bias })
    }

    pub fn flops(&self, h: usize, w: usize) -> u64 {
        let k = self.kernel_size() as u64;
        2 * k * k * self.in_channels() as u64 * self.out_channels() as u64 * (h * w) as u64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::grad_check;

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut r = Rng::new(seed);
        Tensor::from_fn(shape, |_| r.uniform(-1.0, 1.0))
    }

    /// Direct four-loop reference correlation.
    fn naive(input: &Tensor, kernel: &Tensor, pad: usize) -> Tensor {
        let (cin, h, w) = input.chw().unwrap();
        let (cout, k) = (kernel.shape()[0], kernel.shape()[2]);
        Tensor::from_fn(&[cout, h, w], |idx| {
            let (o, y, x) = (idx / (h * w), (idx / w) % h, idx % w);
            let mut acc = 0.0;
            for i in 0..cin {
                for ky in 0..k {
                    for kx in 0..k {
                        let iy = y as isize + ky as isize - pad as isize;
                        let ix = x as isize + kx as isize - pad as isize;
                        if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                            acc += kernel.data()[((o * cin + i) * k + ky) * k + kx]
                                * input.data()[(i * h + iy as usize) * w + ix as usize];
                        }
                    }
                }
            }
            acc
        })
    }

    #[test]
    fn identity_kernel_copies_input() {
        let x = random(&[1, 5, 7], 1);
        let k = Tensor::full(&[1, 1, 1, 1], 1.0);
        assert_eq!(conv2d(&x, &k, 0).unwrap(), x);
    }

    #[test]
    fn matches_naive_reference() {
        let x = random(&[3, 6, 5], 2);
        let k = random(&[2, 3, 3, 3], 3);
        let fast = conv2d(&x, &k, 1).unwrap();
        let slow = naive(&x, &k, 1);
        for (a, b) in fast.data().iter().zip(slow.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_kernel_gives_zero_output_and_correlation_grad() {
        let x = random(&[1, 4, 4], 4);
        let k = Tensor::zeros(&[1, 1, 3, 3]);
        let out = conv2d(&x, &k, 1).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
        let g = random(&[1, 4, 4], 5);
        let (_, gk) = conv2d_backward(&x, &k, &g, 1).unwrap();
        // grad_kernel[ky, kx] = sum_{y,x} x[y+ky-1, x+kx-1] * g[y, x]
        for ky in 0..3 {
            for kx in 0..3 {
                let mut acc = 0.0;
                for y in 0..4isize {
                    for xx in 0..4isize {
                        let (iy, ix) = (y + ky as isize - 1, xx + kx as isize - 1);
                        if (0..4).contains(&iy) && (0..4).contains(&ix) {
                            acc += x.data()[(iy * 4 + ix) as usize] * g.data()[(y * 4 + xx) as usize];
                        }
                    }
                }
                assert!((gk.data()[ky * 3 + kx] - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn shape_errors_name_dimensions() {
        let x = random(&[2, 4, 4], 6);
        let k = random(&[1, 3, 3, 3], 7);
        let err = conv2d(&x, &k, 1).unwrap_err().to_string();
        assert!(err.contains("C_in=3") && err.contains("2 channels"), "{err}");
        let even = random(&[1, 2, 2, 2], 8);
        assert!(conv2d(&x, &even, 1).is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let x = random(&[2, 5, 5], 9);
        let k = random(&[2, 2, 3, 3], 10);
        let g = random(&[2, 5, 5], 11);
        // Scalar objective <conv(x, k), g>.
        let objective = |x: &Tensor, k: &Tensor| -> f64 {
            conv2d(x, k, 1).unwrap().data().iter().zip(g.data()).map(|(a, b)| a * b).sum()
        };
        let (gi, gk) = conv2d_backward(&x, &k, &g, 1).unwrap();

        let err_k = grad_check(
            |p: &[f64]| {
                let kk = Tensor::new(k.shape().to_vec(), p.to_vec()).unwrap();
                Ok((objective(&x, &kk), gk.data().to_vec()))
            },
            k.data(),
            1e-5,
        )
        .unwrap();
        let err_x = grad_check(
            |p: &[f64]| {
                let xx = Tensor::new(x.shape().to_vec(), p.to_vec()).unwrap();
                Ok((objective(&xx, &k), gi.data().to_vec()))
            },
            x.data(),
            1e-5,
        )
        .unwrap();
        assert!(err_k < 1e-6 && err_x < 1e-6, "{err_k} {err_x}");
    }

    #[test]
    fn layer_bias_gradient_is_channel_sum() {
        let mut rng = Rng::new(12);
        let mut layer = Conv2d::he(1, 2, 3, &mut rng);
        layer.bias = Tensor::new(vec![2], vec![0.5, -0.25]).unwrap();
        let x = random(&[1, 4, 4], 13);
        let out = layer.forward(&x).unwrap();
        let bare = conv2d(&x, &layer.weight, 1).unwrap();
        assert!((out.channel(1)[0] - bare.channel(1)[0] + 0.25).abs() < 1e-15);
        let g = Tensor::full(&[2, 4, 4], 1.0);
        let grads = layer.backward(&x, &g, false).unwrap();
        assert_eq!(grads.bias.data(), &[16.0, 16.0]);
        assert!(grads.input.is_none());
    }

    #[test]
    fn flops_formula() {
        let layer = Conv2d::zeros(1, 1, 3);
        assert_eq!(layer.flops(96, 96), 165_888);
    }
}
