use serde::{Deserialize, Serialize};

use crate::detect::CropSample;
use crate::error::{invalid, Error, Result};
use crate::eval::Confusion;
use crate::labels::LabelMap;
use crate::numerics::Sgd;
use crate::rng::Rng;

use super::{SegConfig, SegModel};

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean per-image loss over the epoch.
    pub loss: f64,
    /// Aggregate-confusion MIoU of the predictions made during the epoch.
    pub miou: f64,
}

const SHUFFLE_STREAM: u64 = 0x5e9;

/// Mini-batch momentum SGD on the per-image cross-entropy sum, followed by
/// the centering gauge of [`SegModel::center_gauge`] on the training crops.
/// Returns the final model and one log line per epoch.
pub fn train_seg(crops: &[CropSample], config: &SegConfig) -> Result<(SegModel, Vec<EpochLog>)> {
    config.validate()?;
    if crops.is_empty() {
        return Err(invalid("training set is empty"));
    }
    let mut model = SegModel::init(&config.arch(), config.seed)?;
    let mut flat = model.flat_params();
    let mut opt = Sgd::new(config.lr, config.momentum, flat.len())?;
    let mut rng = Rng::derive(config.seed, SHUFFLE_STREAM);
    let mut order: Vec<usize> = (0..crops.len()).collect();
    let mut log = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        rng.shuffle(&mut order);
        let mut confusion = Confusion::default();
        let mut epoch_loss = 0.0;
        for batch in order.chunks(config.batch_size) {
            let per = crate::par::try_map(batch, |&i| model.loss_and_grad(&crops[i].image, &crops[i].labels))?;
            let mut grad = vec![0.0; flat.len()];
            for (i, (loss, g, pred)) in batch.iter().zip(&per) {
                if !loss.is_finite() {
                    return Err(Error::Diverged {
                        epoch,
                        detail: format!("non-finite loss on {}", crops[*i].sample_id),
                    });
                }
                epoch_loss += loss;
                confusion.add(pred, &crops[*i].labels)?;
                for (a, b) in grad.iter_mut().zip(&g.params) {
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
            model.load_flat(&flat)?;
        }
        let entry = EpochLog {
            epoch,
            loss: epoch_loss / crops.len() as f64,
            miou: confusion.miou(),
        };
        if !entry.loss.is_finite() {
            return Err(Error::Diverged {
                epoch,
                detail: "non-finite epoch loss".into(),
            });
        }
        log.push(entry);
    }
    if config.epochs > 0 {
        let pairs: Vec<_> = crops.iter().map(|c| (&c.image, &c.labels)).collect();
        let g = model.center_gauge(&pairs)?;
        model.apply_gauge(&g)?;
    }
    Ok((model, log))
}

/// Predicts every crop and accumulates one confusion matrix.
pub fn evaluate_seg(model: &SegModel, crops: &[CropSample]) -> Result<(Confusion, Vec<LabelMap>)> {
    let preds = crate::par::try_map(crops, |c| model.predict(&c.image).map(|(_, y)| y))?;
    let mut confusion = Confusion::default();
    for (p, c) in preds.iter().zip(crops) {
        confusion.add(p, &c.labels)?;
    }
    Ok((confusion, preds))
}
