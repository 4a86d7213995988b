//! Deterministic segmentation network: a two-stage encoder-decoder backbone
//! producing a `D`-dimensional latent map `z`, followed by a bias-free linear
//! class head `W` (4 x D) and a per-pixel softmax.
//!
//! Feature maps are stored channel-first, `[C, H, W]`.

mod train;

pub use train::{evaluate_seg, train_seg, EpochLog};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape, Error, Result};
use crate::labels::{LabelMap, NUM_CLASSES};
use crate::numerics::{activation_backward, pool2x, pool2x_backward, upsample2x, upsample2x_backward, Activation, Conv2d};
use crate::rng::Rng;
use crate::tensor::{concat_channels, split_channels, ParamSet, Tensor};

/// Probabilities below this are clamped inside the log of the loss.
pub const LOG_FLOOR: f64 = 1e-12;

/// Offset subtracted from `[0, 1]` crops before the first convolution.
pub const INPUT_OFFSET: f64 = 0.5;

/// Architecture hyper-parameters; everything needed to rebuild a model.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SegArch {
    pub height: usize,
    pub width: usize,
    pub latent_dim: usize,
    pub widths: [usize; 2],
}

impl SegArch {
    pub fn validate(&self) -> Result<()> {
        if self.latent_dim < 4 {
            return Err(invalid(format!("latent dim D must be >= 4, got {}", self.latent_dim)));
        }
        if self.height == 0 || self.width == 0 || self.height % 4 != 0 || self.width % 4 != 0 {
            return Err(invalid(format!(
                "crop size must be positive and divisible by 4, got {}x{}",
                self.height, self.width
            )));
        }
        if self.widths.contains(&0) {
            return Err(invalid("stage widths must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegConfig {
    pub height: usize,
    pub width: usize,
    pub latent_dim: usize,
    pub widths: [usize; 2],
    pub lr: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for SegConfig {
    fn default() -> Self {
        Self {
            height: 96,
            width: 96,
            latent_dim: 8,
            widths: [8, 16],
            lr: 5e-6,
            momentum: 0.9,
            epochs: 4,
            batch_size: 8,
            seed: 1,
        }
    }
}

impl SegConfig {
    pub fn arch(&self) -> SegArch {
        SegArch {
            height: self.height,
            width: self.width,
            latent_dim: self.latent_dim,
            widths: self.widths,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.arch().validate()?;
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(invalid(format!("lr must be finite and >= 0, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(invalid(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        if self.batch_size == 0 {
            return Err(invalid("batch_size must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegModel {
    pub arch: SegArch,
    pub conv1: Conv2d,
    pub conv2: Conv2d,
    pub conv3: Conv2d,
    /// Class head `W`, shape `[4, D]`; row `c` is the class-`c` template.
    pub head: Tensor,
}

/// Per-stage backbone outputs for one crop.
#[derive(Clone, Debug, PartialEq)]
pub struct StageFeatures {
    /// Stage 1 `[w1, H, W]` and stage 2 `[w2, H/2, W/2]` activations.
    pub stages: Vec<Tensor>,
    /// Latent map `[D, H, W]`.
    pub z: Tensor,
}

/// Pre-activations kept for the backward pass.
struct Cache {
    x: Tensor,
    a1: Tensor,
    pooled: Tensor,
    a2: Tensor,
    cat: Tensor,
}

/// Gradient of a scalar loss with respect to every model parameter.
#[derive(Clone, Debug)]
pub struct SegGrads {
    pub params: Vec<f64>,
}

impl SegModel {
    pub fn zeros(arch: &SegArch) -> Result<Self> {
        arch.validate()?;
        let [w1, w2] = arch.widths;
        Ok(Self {
            arch: arch.clone(),
            conv1: Conv2d::zeros(1, w1, 3),
            conv2: Conv2d::zeros(w1, w2, 3),
            conv3: Conv2d::zeros(w1 + w2, arch.latent_dim, 3),
            head: Tensor::zeros(&[NUM_CLASSES, arch.latent_dim]),
        })
    }

    /// He fan-in initialization for every convolution and the class head;
    /// biases start at zero.
    pub fn init(arch: &SegArch, seed: u64) -> Result<Self> {
        arch.validate()?;
        let [w1, w2] = arch.widths;
        let d = arch.latent_dim;
        let mut rng = Rng::new(seed);
        let conv1 = Conv2d::he(1, w1, 3, &mut rng);
        let conv2 = Conv2d::he(w1, w2, 3, &mut rng);
        let conv3 = Conv2d::he(w1 + w2, d, 3, &mut rng);
        let std = (2.0 / d as f64).sqrt();
        let head = Tensor::from_fn(&[NUM_CLASSES, d], |_| std * rng.normal());
        Ok(Self {
            arch: arch.clone(),
            conv1,
            conv2,
            conv3,
            head,
        })
    }

    pub fn params(&self) -> ParamSet {
        ParamSet::new(vec![
            ("conv1.weight".into(), self.conv1.weight.clone()),
            ("conv1.bias".into(), self.conv1.bias.clone()),
            ("conv2.weight".into(), self.conv2.weight.clone()),
            ("conv2.bias".into(), self.conv2.bias.clone()),
            ("conv3.weight".into(), self.conv3.weight.clone()),
            ("conv3.bias".into(), self.conv3.bias.clone()),
            ("head".into(), self.head.clone()),
        ])
    }

    fn param_slots(&mut self) -> [&mut Tensor; 7] {
        [
            &mut self.conv1.weight,
            &mut self.conv1.bias,
            &mut self.conv2.weight,
            &mut self.conv2.bias,
            &mut self.conv3.weight,
            &mut self.conv3.bias,
            &mut self.head,
        ]
    }

    pub fn param_count(&self) -> usize {
        self.params().count()
    }

    pub fn flat_params(&self) -> Vec<f64> {
        self.params().to_flat()
    }

    pub fn load_flat(&mut self, flat: &[f64]) -> Result<()> {
        let n = self.param_count();
        if flat.len() != n {
            return Err(shape(format!("segmentation model has {} parameters, got {}", n, flat.len())));
        }
        let mut off = 0;
        for t in self.param_slots() {
            let len = t.len();
            t.data_mut().copy_from_slice(&flat[off..off + len]);
            off += len;
        }
        Ok(())
    }

    /// Rebuilds a model from named tensors (as stored in a checkpoint).
    pub fn from_params(arch: &SegArch, params: &ParamSet) -> Result<Self> {
        let mut model = Self::zeros(arch)?;
        let expected = model.params();
        if expected.entries.len() != params.entries.len() {
            return Err(Error::Incompatible(format!(
                "segmentation model expects {} tensors, got {}",
                expected.entries.len(),
                params.entries.len()
            )));
        }
        for ((name, want), (got_name, got)) in expected.entries.iter().zip(&params.entries) {
            if name != got_name || want.shape() != got.shape() {
                return Err(Error::Incompatible(format!(
                    "tensor {} {:?} does not match {} {:?}",
                    got_name,
                    got.shape(),
                    name,
                    want.shape()
                )));
            }
        }
        model.load_flat(&params.to_flat())?;
        Ok(model)
    }

    fn check_input(&self, image: &Tensor) -> Result<()> {
        let (h, w) = image.hw()?;
        if (h, w) != (self.arch.height, self.arch.width) {
            return Err(shape(format!(
                "model expects a {}x{} crop, got {}x{}",
                self.arch.height, self.arch.width, h, w
            )));
        }
        Ok(())
    }

    fn forward_cached(&self, image: &Tensor) -> Result<(StageFeatures, Cache)> {
        self.check_input(image)?;
        let (h, w) = (self.arch.height, self.arch.width);
        let x = Tensor::from_fn(&[1, h, w], |i| image.data()[i] - INPUT_OFFSET);
        let a1 = self.conv1.forward(&x)?;
        let s1 = crate::numerics::activation(&a1, Activation::Relu);
        let pooled = pool2x(&s1)?;
        let a2 = self.conv2.forward(&pooled)?;
        let s2 = crate::numerics::activation(&a2, Activation::Relu);
        let up = upsample2x(&s2)?;
        let cat = concat_channels(&[&s1, &up])?;
        let z = self.conv3.forward(&cat)?;
        z.ensure_finite("latent map")?;
        Ok((
            StageFeatures { stages: vec![s1, s2], z },
            Cache { x, a1, pooled, a2, cat },
        ))
    }

    /// Backbone forward pass on an `[H, W]` crop with values in `[0, 1]`.
    pub fn forward_features(&self, image: &Tensor) -> Result<StageFeatures> {
        Ok(self.forward_cached(image)?.0)
    }

    /// Class logits `W z` per pixel, shape `[4, H, W]`.
    pub fn logits(&self, z: &Tensor) -> Result<Tensor> {
        let (d, h, w) = z.chw()?;
        if d != self.arch.latent_dim {
            return Err(shape(format!("latent map has {} channels, head expects {}", d, self.arch.latent_dim)));
        }
        let plane = h * w;
        let mut out = Tensor::zeros(&[NUM_CLASSES, h, w]);
        for c in 0..NUM_CLASSES {
            let dst = out.channel_mut(c);
            for k in 0..d {
                let wk = self.head.data()[c * d + k];
                let src = &z.data()[k * plane..(k + 1) * plane];
                for (o, &v) in dst.iter_mut().zip(src) {
                    *o += wk * v;
                }
            }
        }
        Ok(out)
    }

    /// Per-pixel class probabilities `[4, H, W]` and the argmax label map.
    pub fn predict(&self, image: &Tensor) -> Result<(Tensor, LabelMap)> {
        let f = self.forward_features(image)?;
        self.predict_from_latent(&f.z)
    }

    pub fn predict_from_latent(&self, z: &Tensor) -> Result<(Tensor, LabelMap)> {
        let mut probs = self.logits(z)?;
        let (_, h, w) = probs.chw()?;
        pixel_softmax(&mut probs);
        let labels = argmax_labels(&probs, h, w);
        Ok((probs, labels))
    }

    /// Per-image loss `sum over pixels of -ln max(p_y, 1e-12)` and its
    /// gradient with respect to all parameters (in [`SegModel::params`] order).
    pub fn loss_and_grad(&self, image: &Tensor, labels: &LabelMap) -> Result<(f64, SegGrads, LabelMap)> {
        let (feats, cache) = self.forward_cached(image)?;
        let (h, w) = (self.arch.height, self.arch.width);
        check_labels(labels, h, w)?;
        let d = self.arch.latent_dim;
        let plane = h * w;
        let z = &feats.z;

        let mut probs = self.logits(z)?;
        pixel_softmax(&mut probs);
        let pred = argmax_labels(&probs, h, w);

        // dL/dlogits = p - onehot(y), zero where the log floor is active.
        let mut loss = 0.0;
        let mut dlogits = probs;
        for p in 0..plane {
            let y = labels.data[p] as usize;
            let py = dlogits.data()[y * plane + p];
            if py > LOG_FLOOR {
                loss -= py.ln();
                dlogits.data_mut()[y * plane + p] -= 1.0;
            } else {
                loss -= LOG_FLOOR.ln();
                for c in 0..NUM_CLASSES {
                    dlogits.data_mut()[c * plane + p] = 0.0;
                }
            }
        }

        let mut dhead = vec![0.0; NUM_CLASSES * d];
        let mut dz = Tensor::zeros(&[d, h, w]);
        for c in 0..NUM_CLASSES {
            let g = &dlogits.data()[c * plane..(c + 1) * plane];
            for k in 0..d {
                let zk = &z.data()[k * plane..(k + 1) * plane];
                dhead[c * d + k] = g.iter().zip(zk).map(|(a, b)| a * b).sum();
                let wk = self.head.data()[c * d + k];
                for (o, &gv) in dz.channel_mut(k).iter_mut().zip(g) {
                    *o += wk * gv;
                }
            }
        }

        let backbone = self.backbone_backward(&cache, &dz)?;
        let mut params = backbone;
        params.extend_from_slice(&dhead);
        Ok((loss, SegGrads { params }, pred))
    }

    /// Gradients of the backbone parameters given `dL/dz`, flattened in
    /// [`SegModel::params`] order without the class head.
    fn backbone_backward(&self, cache: &Cache, dz: &Tensor) -> Result<Vec<f64>> {
        let [w1, w2] = self.arch.widths;
        let g3 = self.conv3.backward(&cache.cat, dz, true)?;
        let dcat = g3.input.expect("input gradient requested");
        let parts = split_channels(&dcat, &[w1, w2])?;
        let (mut ds1, dup) = (parts[0].clone(), &parts[1]);
        let ds2 = upsample2x_backward(dup)?;
        let da2 = activation_backward(&cache.a2, &ds2, Activation::Relu)?;
        let g2 = self.conv2.backward(&cache.pooled, &da2, true)?;
        ds1.add_assign(&pool2x_backward(&g2.input.expect("input gradient requested"))?)?;
        let da1 = activation_backward(&cache.a1, &ds1, Activation::Relu)?;
        let g1 = self.conv1.backward(&cache.x, &da1, false)?;

        let mut out = Vec::with_capacity(self.param_count());
        for t in [&g1.weight, &g1.bias, &g2.weight, &g2.bias, &g3.weight, &g3.bias] {
            out.extend_from_slice(t.data());
        }
        Ok(out)
    }

    /// Row `c` of `W` for every class: the latent template `c_c = W^T e_c`.
    pub fn class_centers(&self) -> Tensor {
        self.head.clone()
    }

    /// Rescales latent dimension `d` by `1 / g[d]` (through `conv3`) and
    /// column `d` of `W` by `g[d]`. Logits are unchanged.
    pub fn apply_gauge(&mut self, g: &[f64]) -> Result<()> {
        let d = self.arch.latent_dim;
        if g.len() != d {
            return Err(shape(format!("gauge has {} entries for latent dim {}", g.len(), d)));
        }
        if let Some(x) = g.iter().find(|x| !(x.is_finite() && **x > 0.0)) {
            return Err(invalid(format!("gauge entries must be positive and finite, got {}", x)));
        }
        let per_out = self.conv3.weight.len() / d;
        for (k, &gk) in g.iter().enumerate() {
            for w in &mut self.conv3.weight.data_mut()[k * per_out..(k + 1) * per_out] {
                *w /= gk;
            }
            self.conv3.bias.data_mut()[k] /= gk;
        }
        for row in self.head.data_mut().chunks_mut(d) {
            for (w, &gk) in row.iter_mut().zip(g) {
                *w *= gk;
            }
        }
        Ok(())
    }

    /// Per-dimension gauge minimizing `Σ ‖z / g − g ⊙ c_y‖²` over the labelled
    /// pixels of `samples`: `g_d = (Σ z_d² / Σ c_{y,d}²)^{1/4}`.
    pub fn center_gauge(&self, samples: &[(&Tensor, &LabelMap)]) -> Result<Vec<f64>> {
        let d = self.arch.latent_dim;
        let c = self.head.data();
        let per = crate::par::try_map(samples, |(img, lbl)| {
            let z = self.forward_features(img)?.z;
            let hw = lbl.data.len();
            let mut acc = vec![0.0; 2 * d];
            for k in 0..d {
                let zk = &z.data()[k * hw..(k + 1) * hw];
                for (&y, &v) in lbl.data.iter().zip(zk) {
                    acc[k] += v * v;
                    acc[d + k] += c[y as usize * d + k].powi(2);
                }
            }
            Ok::<_, Error>(acc)
        })?;
        let mut total = vec![0.0; 2 * d];
        for a in &per {
            for (t, x) in total.iter_mut().zip(a) {
                *t += x;
            }
        }
        Ok((0..d)
            .map(|k| {
                let (zz, cc) = (total[k], total[d + k]);
                if zz > 0.0 && cc > 0.0 {
                    (zz / cc).powf(0.25)
                } else {
                    1.0
                }
            })
            .collect())
    }
}

fn check_labels(labels: &LabelMap, h: usize, w: usize) -> Result<()> {
    if (labels.height, labels.width) != (h, w) {
        return Err(shape(format!(
            "label map is {}x{}, expected {}x{}",
            labels.height, labels.width, h, w
        )));
    }
    labels.validate("batch")
}

fn pixel_softmax(t: &mut Tensor) {
    let (k, h, w) = t.chw().expect("rank-3 logits");
    let plane = h * w;
    let data = t.data_mut();
    for p in 0..plane {
        let mut m = f64::NEG_INFINITY;
        for c in 0..k {
            m = m.max(data[c * plane + p]);
        }
        let mut s = 0.0;
        for c in 0..k {
            let e = (data[c * plane + p] - m).exp();
            data[c * plane + p] = e;
            s += e;
        }
        for c in 0..k {
            data[c * plane + p] /= s;
        }
    }
}

/// Argmax over the class axis; ties go to the smallest class index.
fn argmax_labels(probs: &Tensor, h: usize, w: usize) -> LabelMap {
    let plane = h * w;
    let d = probs.data();
    let data = (0..plane)
        .map(|p| {
            let mut best = 0;
            for c in 1..NUM_CLASSES {
                if d[c * plane + p] > d[best * plane + p] {
                    best = c;
                }
            }
            best as u8
        })
        .collect();
    LabelMap {
        height: h,
        width: w,
        data,
    }
}

/// Mean over the batch of per-image cross-entropy sums, with the gradient.
pub fn seg_loss(model: &SegModel, batch: &[(&Tensor, &LabelMap)]) -> Result<(f64, Vec<f64>)> {
    if batch.is_empty() {
        return Err(invalid("empty batch"));
    }
    let per = crate::par::try_map(batch, |(x, y)| model.loss_and_grad(x, y))?;
    let n = batch.len() as f64;
    let mut grad = vec![0.0; model.param_count()];
    let mut loss = 0.0;
    for (l, g, _) in &per {
        loss += l;
        for (a, b) in grad.iter_mut().zip(&g.params) {
            *a += b;
        }
    }
    for g in &mut grad {
        *g /= n;
    }
    Ok((loss / n, grad))
}

/// Multiply-accumulate FLOPs (2 per MAC) of the backbone, plus the class
/// head when `include_head` is set.
pub fn count_flops(arch: &SegArch, include_head: bool) -> u64 {
    let [w1, w2] = arch.widths;
    let (h, w) = (arch.height, arch.width);
    let d = arch.latent_dim;
    let conv = |cin: usize, cout: usize, h: usize, w: usize| (2 * 9 * cin * cout * h * w) as u64;
    let mut total = conv(1, w1, h, w) + conv(w1, w2, h / 2, w / 2) + conv(w1 + w2, d, h, w);
    if include_head {
        total += (2 * NUM_CLASSES * d * h * w) as u64;
    }
    total
}
