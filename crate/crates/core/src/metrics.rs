//! Dice loss for training and hard dice for rewards and evaluation.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::datagen::{batch, Volume};
use crate::error::{shape_err, Error, Result};
use crate::search_space::BlockDesign;
use crate::supernet::{Network, NormMode};
use crate::tensor::{Real, Tensor};

pub const SOFT_DICE_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiceConfig {
    pub include_background: bool,
}

impl Default for DiceConfig {
    fn default() -> Self {
        Self {
            include_background: true,
        }
    }
}

impl DiceConfig {
    pub fn included(&self, n_classes: usize) -> Vec<bool> {
        (0..n_classes).map(|k| k > 0 || self.include_background).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiceReport {
    /// Dice per class id, averaged over volumes.
    pub per_class: Vec<f64>,
    /// Mean of per-volume mean dice.
    pub mean: f64,
    /// Population standard deviation of per-volume mean dice.
    pub std_over_volumes: f64,
    pub n_volumes: usize,
    pub include_background: bool,
}

/// `2|P∩G| / (|P| + |G|)` per class; 1.0 when a class is absent from both.
pub fn class_dice(pred: &[u8], truth: &[u8], n_classes: usize) -> Result<Vec<f64>> {
    if pred.len() != truth.len() {
        return Err(shape_err!("dice: {} predictions vs {} labels", pred.len(), truth.len()));
    }
    let mut inter = vec![0usize; n_classes];
    let mut np = vec![0usize; n_classes];
    let mut ng = vec![0usize; n_classes];
    for (&p, &g) in pred.iter().zip(truth) {
        let (p, g) = (p as usize, g as usize);
        if p >= n_classes || g >= n_classes {
            return Err(Error::InvalidArgument(alloc::format!("label outside 0..{n_classes}")));
        }
        np[p] += 1;
        ng[g] += 1;
        if p == g {
            inter[p] += 1;
        }
    }
    Ok((0..n_classes)
        .map(|k| {
            let den = np[k] + ng[k];
            if den == 0 {
                1.0
            } else {
                2.0 * inter[k] as f64 / den as f64
            }
        })
        .collect())
}

fn mean_of(per_class: &[f64], cfg: DiceConfig) -> f64 {
    let inc = cfg.included(per_class.len());
    let (s, n) = per_class
        .iter()
        .zip(&inc)
        .filter(|(_, &i)| i)
        .fold((0.0, 0usize), |(s, n), (&d, _)| (s + d, n + 1));
    s / n as f64
}

/// Hard dice of one prediction/label pair.
pub fn hard_dice(pred: &[u8], truth: &[u8], n_classes: usize, cfg: DiceConfig) -> Result<DiceReport> {
    aggregate(&[class_dice(pred, truth, n_classes)?], cfg)
}

/// Combines per-volume class dice into a mean ± std report.
pub fn aggregate(per_volume: &[Vec<f64>], cfg: DiceConfig) -> Result<DiceReport> {
    let first = per_volume.first().ok_or_else(|| Error::Empty("no volumes to aggregate".into()))?;
    let k = first.len();
    let n = per_volume.len() as f64;
    let mut per_class = vec![0.0; k];
    for v in per_volume {
        for (a, &d) in per_class.iter_mut().zip(v) {
            *a += d;
        }
    }
    per_class.iter_mut().for_each(|a| *a /= n);
    let means: Vec<f64> = per_volume.iter().map(|v| mean_of(v, cfg)).collect();
    let mean = means.iter().sum::<f64>() / n;
    let var = means.iter().map(|m| (m - mean) * (m - mean)).sum::<f64>() / n;
    Ok(DiceReport {
        per_class,
        mean,
        std_over_volumes: libm::sqrt(var),
        n_volumes: per_volume.len(),
        include_background: cfg.include_background,
    })
}

/// Soft dice loss of class scores (softmax over channels) against labels.
pub fn soft_dice_loss<T: Real>(tape: &mut Tape<T>, scores: Var, labels: &[u8], cfg: DiceConfig) -> Result<Var> {
    let probs = tape.softmax_channels(scores)?;
    let k = tape.value(probs).layout()?.channels;
    tape.soft_dice(probs, labels, &cfg.included(k), T::from_f64(SOFT_DICE_EPS))
}

/// Per-position argmax over channels, `(batch, spatial)` row-major.
pub fn argmax_labels(scores: &Tensor<f32>) -> Result<Vec<u8>> {
    let l = scores.layout()?;
    let s = l.spatial_len();
    let d = scores.data();
    let mut out = vec![0u8; l.batch * s];
    for b in 0..l.batch {
        for q in 0..s {
            let mut best = 0;
            for c in 1..l.channels {
                if d[(b * l.channels + c) * s + q] > d[(b * l.channels + best) * s + q] {
                    best = c;
                }
            }
            out[b * s + q] = best as u8;
        }
    }
    Ok(out)
}

/// Per-volume class dice of `net` on `volumes`, predicted in chunks of
/// `batch_size` volumes.
pub fn per_volume_dice(
    net: &Network,
    design: Option<&BlockDesign>,
    volumes: &[Volume],
    batch_size: usize,
    mode: NormMode,
) -> Result<Vec<Vec<f64>>> {
    if volumes.is_empty() {
        return Err(Error::Empty("evaluation needs at least one volume".into()));
    }
    let k = net.spec.n_classes;
    let mut out = Vec::with_capacity(volumes.len());
    for chunk in volumes.chunks(batch_size.max(1)) {
        let refs: Vec<&Volume> = chunk.iter().collect();
        let (x, labels) = batch(&refs)?;
        let scores = net.predict(design, x, mode)?;
        let pred = argmax_labels(&scores)?;
        let per = labels.len() / chunk.len();
        for i in 0..chunk.len() {
            out.push(class_dice(&pred[i * per..(i + 1) * per], &labels[i * per..(i + 1) * per], k)?);
        }
    }
    Ok(out)
}

/// Hard-dice evaluation of a trained network, mean ± std over volumes.
pub fn evaluate(
    net: &Network,
    design: Option<&BlockDesign>,
    volumes: &[Volume],
    batch_size: usize,
    mode: NormMode,
    cfg: DiceConfig,
) -> Result<DiceReport> {
    aggregate(&per_volume_dice(net, design, volumes, batch_size, mode)?, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_masks_score_one() {
        let y = [0u8, 1, 2, 3, 3, 1];
        let r = hard_dice(&y, &y, 4, DiceConfig::default()).unwrap();
        assert_eq!(r.per_class, vec![1.0; 4]);
        assert_eq!((r.mean, r.std_over_volumes), (1.0, 0.0));
    }

    #[test]
    fn hand_computed_example() {
        let d = class_dice(&[1, 1, 0], &[1, 0, 0], 2).unwrap();
        assert!((d[1] - 2.0 / 3.0).abs() < 1e-15);
        assert!((d[0] - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn disjoint_masks_score_zero() {
        let d = class_dice(&[1, 1, 0, 0], &[0, 0, 1, 1], 2).unwrap();
        assert_eq!(d, vec![0.0, 0.0]);
    }

    #[test]
    fn absent_class_scores_one() {
        let d = class_dice(&[0, 0], &[0, 0], 3).unwrap();
        assert_eq!(d, vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn background_exclusion() {
        let cfg = DiceConfig {
            include_background: false,
        };
        let r = hard_dice(&[0, 1, 1], &[1, 1, 1], 2, cfg).unwrap();
        assert!((r.mean - 0.8).abs() < 1e-12);
    }

    #[test]
    fn mismatched_lengths_fail() {
        assert!(class_dice(&[0, 1], &[0], 2).is_err());
    }

    #[test]
    fn aggregate_std() {
        let r = aggregate(&[vec![1.0, 1.0], vec![0.5, 0.5]], DiceConfig::default()).unwrap();
        assert!((r.mean - 0.75).abs() < 1e-12 && (r.std_over_volumes - 0.25).abs() < 1e-12);
        assert!(aggregate(&[], DiceConfig::default()).is_err());
    }

    #[test]
    fn uniform_probabilities_soft_dice() {
        // N = 8 positions, n_k = 2 per class: each class dice ~ 0.25
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::zeros(&[1, 4, 8]));
        let labels = [0u8, 0, 1, 1, 2, 2, 3, 3];
        let loss = soft_dice_loss(&mut tape, x, &labels, DiceConfig::default()).unwrap();
        let per_class = (2.0 * 0.25 * 2.0 + SOFT_DICE_EPS) / (0.25 * 8.0 + 2.0 + SOFT_DICE_EPS);
        assert!((per_class - 0.25).abs() < 1e-5);
        assert!((tape.value(loss).data()[0] - (1.0 - per_class)).abs() < 1e-12);
    }

    #[test]
    fn confident_correct_scores_give_near_zero_loss() {
        let labels = [0u8, 1, 2, 3, 3, 2];
        let mut data = vec![-40.0f64; 4 * 6];
        for (q, &y) in labels.iter().enumerate() {
            data[y as usize * 6 + q] = 40.0;
        }
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::new(vec![1, 4, 6], data).unwrap());
        let loss = soft_dice_loss(&mut tape, x, &labels, DiceConfig::default()).unwrap();
        assert!(tape.value(loss).data()[0] <= 1e-4);
    }
}
