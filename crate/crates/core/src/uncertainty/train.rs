use serde::{Deserialize, Serialize};

use crate::detect::CropSample;
use crate::error::{invalid, Error, Result};
use crate::numerics::Adam;
use crate::par;
use crate::rng::Rng;
use crate::segnet::SegModel;
use crate::tensor::Tensor;

use super::{residual_targets, LossKind, UncArch, UncHead, DEFAULT_EPS_FLOOR};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UncConfig {
    pub head_width: usize,
    pub eps_floor: f64,
    pub lr: f64,
    /// First-moment decay of the Adam optimizer.
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for UncConfig {
    fn default() -> Self {
        Self {
            head_width: 16,
            eps_floor: DEFAULT_EPS_FLOOR,
            lr: 1e-3,
            momentum: 0.9,
            epochs: 8,
            batch_size: 8,
            seed: 2,
        }
    }
}

impl UncConfig {
    pub fn validate(&self) -> Result<()> {
        if self.head_width == 0 || self.batch_size == 0 {
            return Err(invalid("head_width and batch_size must be positive"));
        }
        if !(self.eps_floor > 0.0) {
            return Err(invalid(format!("eps_floor must be positive, got {}", self.eps_floor)));
        }
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(invalid(format!("lr must be finite and >= 0, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(invalid(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UncEpochLog {
    pub epoch: usize,
    /// Mean per-image training loss.
    pub loss: f64,
    /// Mean over images, pixels and dimensions of `|σ²_d − v_d²|`.
    pub target_error: f64,
}

const SHUFFLE_STREAM: u64 = 0x4ead;

fn mean_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64
}

/// Trains the head on top of a frozen segmentation model. Only the head
/// parameters are updated; the class centers come from the model's `W`.
pub fn train_unc(
    crops: &[CropSample],
    seg: &SegModel,
    kind: LossKind,
    config: &UncConfig,
) -> Result<(UncHead, Vec<UncEpochLog>)> {
    config.validate()?;
    if crops.is_empty() {
        return Err(invalid("training set is empty"));
    }
    let arch = UncArch {
        seg: seg.arch.clone(),
        head_width: config.head_width,
    };
    let centers = seg.class_centers();
    let mut head = UncHead::init(&arch, config.eps_floor, config.seed)?;
    let mut flat = head.flat_params();
    let mut opt = Adam::new(config.lr, config.momentum, flat.len())?;
    let mut rng = Rng::derive(config.seed, SHUFFLE_STREAM);
    let mut order: Vec<usize> = (0..crops.len()).collect();
    let mut log = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        rng.shuffle(&mut order);
        let (mut loss_sum, mut err_sum) = (0.0, 0.0);
        for batch in order.chunks(config.batch_size) {
            let per = par::try_map(batch, |&i| {
                let f = seg.forward_features(&crops[i].image)?;
                let target = residual_targets(&f.z, &crops[i].labels, &centers)?;
                let (l, g, cov) = head.loss_and_grad(&f, &target, kind)?;
                Ok::<_, Error>((l, g, mean_abs_diff(&cov.0, &target)))
            })?;
            let mut grad = vec![0.0; flat.len()];
            for (l, g, e) in &per {
                if !l.is_finite() {
                    return Err(Error::Diverged {
                        epoch,
                        detail: "non-finite head loss".into(),
                    });
                }
                loss_sum += l;
                err_sum += e;
                for (a, b) in grad.iter_mut().zip(g) {
                    *a += b;
                }
            }
            let n = batch.len() as f64;
            for g in &mut grad {
                *g /= n;
            }
            opt.step(&mut flat, &grad).map_err(|e| Error::Diverged {
                epoch,
                detail: e.to_string(),
            })?;
            head.load_flat(&flat)?;
        }
        let n = crops.len() as f64;
        log.push(UncEpochLog {
            epoch,
            loss: loss_sum / n,
            target_error: err_sum / n,
        });
    }
    Ok((head, log))
}

/// Mean `|σ² − v²|` of a trained head over `crops`.
pub fn evaluate_head(seg: &SegModel, head: &UncHead, crops: &[CropSample]) -> Result<f64> {
    if crops.is_empty() {
        return Err(invalid("evaluation set is empty"));
    }
    let centers = seg.class_centers();
    let errs = par::try_map(crops, |c| {
        let f = seg.forward_features(&c.image)?;
        let target = residual_targets(&f.z, &c.labels, &centers)?;
        let cov = head.forward(&f)?;
        Ok::<_, Error>(mean_abs_diff(&cov.0, &target))
    })?;
    Ok(errs.iter().sum::<f64>() / errs.len() as f64)
}
