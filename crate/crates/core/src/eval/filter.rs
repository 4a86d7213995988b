use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

use super::Confusion;

/// Segmentation quality after discarding the most uncertain images.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilterResult {
    pub threshold_pct: f64,
    pub retained_count: usize,
    pub retained_miou: f64,
}

/// One scored, evaluated image.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoredImage {
    pub sample_id: String,
    pub s_unc: f64,
    pub confusion: Confusion,
}

/// Number of images dropped when removing the top `pct` percent of `n`.
pub fn dropped_count(n: usize, pct: f64) -> usize {
    ((pct * n as f64 / 100.0) + 1e-9).floor() as usize
}

/// Ranks images by `s_unc` (highest first, ties by ascending id), drops the
/// top `pct` percent for each entry of `pcts` and reports the MIoU of the
/// aggregate confusion over the remaining images.
pub fn rank_and_filter(images: &[ScoredImage], pcts: &[f64]) -> Result<Vec<FilterResult>> {
    let mut order: Vec<&ScoredImage> = images.iter().collect();
    order.sort_by(|a, b| b.s_unc.total_cmp(&a.s_unc).then_with(|| a.sample_id.cmp(&b.sample_id)));
    pcts.iter()
        .map(|&pct| {
            if !(0.0..=100.0).contains(&pct) {
                return Err(invalid(format!("filter percentage must lie in [0, 100], got {}", pct)));
            }
            let drop = dropped_count(order.len(), pct);
            let kept = &order[drop.min(order.len())..];
            if kept.is_empty() {
                return Err(invalid(format!("no images left after removing the top {}%", pct)));
            }
            let mut agg = Confusion::default();
            for img in kept {
                agg.merge(&img.confusion);
            }
            Ok(FilterResult {
                threshold_pct: pct,
                retained_count: kept.len(),
                retained_miou: agg.miou(),
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Decision {
    Accept,
    Reject,
}

/// Rejects iff `s_unc > tau`; a score equal to the threshold is accepted.
pub fn threshold_decision(s_unc: f64, tau: f64) -> Decision {
    if s_unc > tau {
        Decision::Reject
    } else {
        Decision::Accept
    }
}

/// Empirical `q`-quantile (`q` in `[0, 1]`) with linear interpolation
/// between order statistics.
pub fn percentile(values: &[f64], q: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(invalid("percentile of an empty set"));
    }
    if !(0.0..=1.0).contains(&q) {
        return Err(invalid(format!("quantile must lie in [0, 1], got {}", q)));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    Ok(v[lo] + (v[hi] - v[lo]) * (pos - lo as f64))
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(invalid(format!(
            "spearman needs two equal-length samples of size >= 2, got {} and {}",
            x.len(),
            y.len()
        )));
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(invalid("spearman is undefined for a constant sample"));
    }
    Ok(sxy / (sxx * syy).sqrt())
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut out = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = r;
        }
        i = j + 1;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image(id: &str, s: f64, correct: u64, wrong: u64) -> ScoredImage {
        let mut c = Confusion::default();
        c.counts[1][1] = correct;
        c.counts[1][2] = wrong;
        c.counts[2][2] = correct;
        ScoredImage {
            sample_id: id.into(),
            s_unc: s,
            confusion: c,
        }
    }

    #[test]
    fn equal_scores_drop_by_id() {
        let imgs: Vec<_> = (0..100).map(|i| image(&format!("s{:03}", i), 1.0, 10, i % 7)).collect();
        let r = rank_and_filter(&imgs, &[0.0, 1.0, 2.0]).unwrap();
        assert_eq!(r[0].retained_count, 100);
        assert_eq!(r[1].retained_count, 99);
        // the lowest id is dropped first: s000 has no errors
        let mut rest = Confusion::default();
        for i in &imgs[1..] {
            rest.merge(&i.confusion);
        }
        assert_eq!(r[1].retained_miou, rest.miou());
    }

    #[test]
    fn pct_zero_is_unfiltered() {
        let imgs: Vec<_> = (0..10).map(|i| image(&format!("{}", i), i as f64, 10, i)).collect();
        let mut all = Confusion::default();
        for i in &imgs {
            all.merge(&i.confusion);
        }
        assert_eq!(rank_and_filter(&imgs, &[0.0]).unwrap()[0].retained_miou, all.miou());
    }

    #[test]
    fn filtering_everything_is_an_error() {
        let imgs = vec![image("a", 0.0, 1, 0)];
        assert!(rank_and_filter(&imgs, &[100.0]).is_err());
    }

    #[test]
    fn decisions() {
        assert_eq!(threshold_decision(3.0, 3.0), Decision::Accept);
        assert_eq!(threshold_decision(1e300, f64::INFINITY), Decision::Accept);
        assert_eq!(threshold_decision(3.5, 3.0), Decision::Reject);
    }

    #[test]
    fn percentile_interpolates() {
        let v: Vec<f64> = (0..=10).map(|i| i as f64).collect();
        assert_eq!(percentile(&v, 0.95).unwrap(), 9.5);
        assert_eq!(percentile(&v, 0.0).unwrap(), 0.0);
        assert!(percentile(&[], 0.5).is_err());
    }

    #[test]
    fn spearman_values() {
        let x = [1.0, 2.0, 3.0, 4.0];
        assert!((spearman(&x, &[10.0, 20.0, 30.0, 40.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!((spearman(&x, &[4.0, 3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-15);
        assert_eq!(ranks(&[2.0, 1.0, 2.0]), vec![2.5, 1.0, 2.5]);
    }
}
