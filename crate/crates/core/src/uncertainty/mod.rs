//! Projection head predicting a positive diagonal covariance per pixel from
//! the frozen backbone's stage features, its two training objectives, and
//! the image-level uncertainty score.

mod loss;
mod train;

pub use loss::{
    grad_vanishing_probe, landscape_csv, landscape_grid, loss_grad, optimal_cov_oracle, original_loss,
    original_loss_grad, original_summand, quad_form_trace_check, residual_targets, surrogate_loss,
    surrogate_loss_grad, surrogate_summand, unc_score, LandscapeRow, LossKind,
};
pub use train::{evaluate_head, train_unc, UncConfig, UncEpochLog};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape, Error, Result};
use crate::numerics::{
    activation, activation_backward, pool2x, pool2x_backward, softplus, upsample2x, upsample2x_backward, Activation,
    Conv2d,
};
use crate::rng::Rng;
use crate::segnet::{SegArch, StageFeatures};
use crate::tensor::{concat_channels, split_channels, ParamSet, Tensor};

pub const DEFAULT_EPS_FLOOR: f64 = 1e-6;

/// Per-pixel diagonal variances, `[D, H, W]`, all strictly positive.
#[derive(Clone, Debug, PartialEq)]
pub struct DiagCovMap(pub Tensor);

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct UncArch {
    pub seg: SegArch,
    pub head_width: usize,
}

/// Head layout (`m` = head width):
///
/// ```text
/// s2 [w2,H/2] -conv_a,relu-> e1 [m,H/2] -pool,conv_b,relu-> b [m,H/4]
/// up(b) ++ e1 -conv_c,relu-> h1 [m,H/2]
/// up(h1) ++ s1 ++ z -conv_d-> softplus + eps -> σ² [D,H]
/// ```
#[derive(Clone, Debug, PartialEq)]
pub struct UncHead {
    pub arch: UncArch,
    pub eps_floor: f64,
    pub conv_a: Conv2d,
    pub conv_b: Conv2d,
    pub conv_c: Conv2d,
    pub conv_d: Conv2d,
}

struct Cache {
    s2: Tensor,
    pre_a: Tensor,
    pooled: Tensor,
    pre_b: Tensor,
    cat_c: Tensor,
    pre_c: Tensor,
    cat_d: Tensor,
    pre_d: Tensor,
}

impl UncHead {
    fn build(arch: &UncArch, eps_floor: f64, mut make: impl FnMut(usize, usize) -> Conv2d) -> Result<Self> {
        arch.seg.validate()?;
        if arch.head_width == 0 {
            return Err(invalid("head width must be positive"));
        }
        if !(eps_floor > 0.0) {
            return Err(invalid(format!("eps_floor must be positive, got {}", eps_floor)));
        }
        let m = arch.head_width;
        let [w1, w2] = arch.seg.widths;
        let d = arch.seg.latent_dim;
        Ok(Self {
            arch: arch.clone(),
            eps_floor,
            conv_a: make(w2, m),
            conv_b: make(m, m),
            conv_c: make(2 * m, m),
            conv_d: make(m + w1 + d, d),
        })
    }

    pub fn zeros(arch: &UncArch, eps_floor: f64) -> Result<Self> {
        Self::build(arch, eps_floor, |cin, cout| Conv2d::zeros(cin, cout, 3))
    }

    /// He fan-in initialization, zero biases.
    pub fn init(arch: &UncArch, eps_floor: f64, seed: u64) -> Result<Self> {
        let mut rng = Rng::new(seed);
        Self::build(arch, eps_floor, |cin, cout| Conv2d::he(cin, cout, 3, &mut rng))
    }

    fn convs(&self) -> [(&'static str, &Conv2d); 4] {
        [
            ("conv_a", &self.conv_a),
            ("conv_b", &self.conv_b),
            ("conv_c", &self.conv_c),
            ("conv_d", &self.conv_d),
        ]
    }

    pub fn params(&self) -> ParamSet {
        let mut entries = Vec::with_capacity(8);
        for (name, c) in self.convs() {
            entries.push((format!("{}.weight", name), c.weight.clone()));
            entries.push((format!("{}.bias", name), c.bias.clone()));
        }
        ParamSet::new(entries)
    }

    pub fn param_count(&self) -> usize {
        self.convs().iter().map(|(_, c)| c.weight.len() + c.bias.len()).sum()
    }

    pub fn flat_params(&self) -> Vec<f64> {
        self.params().to_flat()
    }

    pub fn load_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(shape(format!("head has {} parameters, got {}", self.param_count(), flat.len())));
        }
        let mut off = 0;
        for c in [&mut self.conv_a, &mut self.conv_b, &mut self.conv_c, &mut self.conv_d] {
            for t in [&mut c.weight, &mut c.bias] {
                let n = t.len();
                t.data_mut().copy_from_slice(&flat[off..off + n]);
                off += n;
            }
        }
        Ok(())
    }

    pub fn from_params(arch: &UncArch, eps_floor: f64, params: &ParamSet) -> Result<Self> {
        let mut head = Self::zeros(arch, eps_floor)?;
        let expected = head.params();
        let matches = expected.entries.len() == params.entries.len()
            && expected
                .entries
                .iter()
                .zip(&params.entries)
                .all(|((a, ta), (b, tb))| a == b && ta.shape() == tb.shape());
        if !matches {
            return Err(Error::Incompatible("head tensors do not match the head architecture".into()));
        }
        head.load_flat(&params.to_flat())?;
        Ok(head)
    }

    fn check_stages(&self, f: &StageFeatures) -> Result<()> {
        let s = &self.arch.seg;
        let [w1, w2] = s.widths;
        let (h, w) = (s.height, s.width);
        let want = [vec![w1, h, w], vec![w2, h / 2, w / 2]];
        if f.stages.len() != 2 {
            return Err(shape(format!("head expects 2 stage maps, got {}", f.stages.len())));
        }
        for (i, (got, want)) in f.stages.iter().zip(&want).enumerate() {
            if got.shape() != want.as_slice() {
                return Err(shape(format!(
                    "stage {} map has shape {:?}, head expects {:?}",
                    i + 1,
                    got.shape(),
                    want
                )));
            }
        }
        if f.z.shape() != [s.latent_dim, h, w] {
            return Err(shape(format!(
                "latent map has shape {:?}, head expects {:?}",
                f.z.shape(),
                [s.latent_dim, h, w]
            )));
        }
        Ok(())
    }

    fn forward_cached(&self, f: &StageFeatures) -> Result<(DiagCovMap, Cache)> {
        self.check_stages(f)?;
        let (s1, s2) = (&f.stages[0], &f.stages[1]);
        let pre_a = self.conv_a.forward(s2)?;
        let e1 = activation(&pre_a, Activation::Relu);
        let pooled = pool2x(&e1)?;
        let pre_b = self.conv_b.forward(&pooled)?;
        let b = activation(&pre_b, Activation::Relu);
        let cat_c = concat_channels(&[&e1, &upsample2x(&b)?])?;
        let pre_c = self.conv_c.forward(&cat_c)?;
        let h1 = activation(&pre_c, Activation::Relu);
        let cat_d = concat_channels(&[&upsample2x(&h1)?, s1, &f.z])?;
        let pre_d = self.conv_d.forward(&cat_d)?;
        let mut cov = pre_d.clone();
        for v in cov.data_mut() {
            *v = softplus(*v) + self.eps_floor;
        }
        cov.ensure_finite("predicted variances")?;
        Ok((
            DiagCovMap(cov),
            Cache {
                s2: s2.clone(),
                pre_a,
                pooled,
                pre_b,
                cat_c,
                pre_c,
                cat_d,
                pre_d,
            },
        ))
    }

    /// Variances `softplus(.) + eps_floor`, `[D, H, W]`.
    pub fn forward(&self, f: &StageFeatures) -> Result<DiagCovMap> {
        Ok(self.forward_cached(f)?.0)
    }

    /// Forward pass, loss on the squared residual `target`, and the gradient
    /// with respect to the head parameters (in [`UncHead::params`] order).
    /// The stage features are treated as constants.
    pub fn loss_and_grad(&self, f: &StageFeatures, target: &Tensor, kind: LossKind) -> Result<(f64, Vec<f64>, DiagCovMap)> {
        let (cov, cache) = self.forward_cached(f)?;
        let (loss, dcov) = loss_grad(kind, &cov, target)?;
        let grads = self.backward(&cache, &dcov)?;
        Ok((loss, grads, cov))
    }

    fn backward(&self, c: &Cache, dcov: &Tensor) -> Result<Vec<f64>> {
        let m = self.arch.head_width;
        let [w1, _] = self.arch.seg.widths;
        let d = self.arch.seg.latent_dim;
        let dpre_d = activation_backward(&c.pre_d, dcov, Activation::Softplus)?;
        let gd = self.conv_d.backward(&c.cat_d, &dpre_d, true)?;
        let dcat_d = split_channels(gd.input.as_ref().expect("input gradient requested"), &[m, w1, d])?;
        let dh1 = upsample2x_backward(&dcat_d[0])?;
        let dpre_c = activation_backward(&c.pre_c, &dh1, Activation::Relu)?;
        let gc = self.conv_c.backward(&c.cat_c, &dpre_c, true)?;
        let dcat_c = split_channels(gc.input.as_ref().expect("input gradient requested"), &[m, m])?;
        let db = upsample2x_backward(&dcat_c[1])?;
        let dpre_b = activation_backward(&c.pre_b, &db, Activation::Relu)?;
        let gb = self.conv_b.backward(&c.pooled, &dpre_b, true)?;
        let mut de1 = dcat_c[0].clone();
        de1.add_assign(&pool2x_backward(gb.input.as_ref().expect("input gradient requested"))?)?;
        let dpre_a = activation_backward(&c.pre_a, &de1, Activation::Relu)?;
        let ga = self.conv_a.backward(&c.s2, &dpre_a, false)?;

        let mut out = Vec::with_capacity(self.param_count());
        for g in [&ga, &gb, &gc, &gd] {
            out.extend_from_slice(g.weight.data());
            out.extend_from_slice(g.bias.data());
        }
        Ok(out)
    }

    /// FLOPs of the four head convolutions.
    pub fn flops(&self) -> u64 {
        head_flops(&self.arch)
    }
}

pub fn head_flops(arch: &UncArch) -> u64 {
    let m = arch.head_width;
    let [w1, w2] = arch.seg.widths;
    let d = arch.seg.latent_dim;
    let (h, w) = (arch.seg.height, arch.seg.width);
    let conv = |cin: usize, cout: usize, h: usize, w: usize| (2 * 9 * cin * cout * h * w) as u64;
    conv(w2, m, h / 2, w / 2) + conv(m, m, h / 4, w / 4) + conv(2 * m, m, h / 2, w / 2) + conv(m + w1 + d, d, h, w)
}
