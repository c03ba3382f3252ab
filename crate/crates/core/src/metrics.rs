//! Ranking and loss metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::BCE_CLAMP;

/// Area under the ROC curve from the Mann-Whitney rank statistic. Tied
/// scores share their average rank, so a positive-negative tie counts ½.
pub fn auc(scores: &[f64], labels: &[f64]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::dim(format!(
            "{} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if let Some(s) = scores.iter().find(|s| s.is_nan()) {
        return Err(Error::Numeric(format!("score {s} cannot be ranked")));
    }
    let n_pos = labels.iter().filter(|&&y| y > 0.5).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedAuc(format!(
            "{n_pos} positives and {n_neg} negatives"
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut pos_rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks are 1-based; the tie group i..=j shares their mean
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            if labels[k] > 0.5 {
                pos_rank_sum += rank;
            }
        }
        i = j + 1;
    }
    let (p, q) = (n_pos as f64, n_neg as f64);
    Ok((pos_rank_sum - p * (p + 1.0) / 2.0) / (p * q))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RelaImprMode {
    /// `(a − b) / b`
    #[default]
    PlainRelative,
    /// `(a − 0.5) / (b − 0.5) − 1`
    AboveRandom,
}

/// Relative AUC improvement of `model` over `base`, in percent.
pub fn rela_impr(model: f64, base: f64, mode: RelaImprMode) -> Result<f64> {
    let ratio = match mode {
        RelaImprMode::PlainRelative => {
            if base == 0.0 {
                return Err(Error::contract("base AUC is zero"));
            }
            (model - base) / base
        }
        RelaImprMode::AboveRandom => {
            if base == 0.5 {
                return Err(Error::contract("base AUC is exactly random"));
            }
            (model - 0.5) / (base - 0.5) - 1.0
        }
    };
    Ok(100.0 * ratio)
}

/// Mean binary cross-entropy with probabilities clamped to
/// `[1e-12, 1 − 1e-12]`.
pub fn bce(probs: &[f64], labels: &[f64]) -> Result<f64> {
    if probs.len() != labels.len() || probs.is_empty() {
        return Err(Error::dim(format!(
            "{} probabilities vs {} labels",
            probs.len(),
            labels.len()
        )));
    }
    let sum: f64 = probs
        .iter()
        .zip(labels)
        .map(|(&p, &y)| {
            let p = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .sum();
    Ok(sum / probs.len() as f64)
}

/// `L_y + w1·L_con + w2·L_syn`.
pub fn total_loss(l_y: f64, l_con: f64, l_syn: f64, w1: f64, w2: f64) -> f64 {
    l_y + w1 * l_con + w2 * l_syn
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Probability that a positive outscores a negative, ties counting ½.
    fn pairwise_auc(scores: &[f64], labels: &[f64]) -> f64 {
        let (mut wins, mut pairs) = (0.0, 0.0);
        for (i, &yi) in labels.iter().enumerate() {
            for (j, &yj) in labels.iter().enumerate() {
                if yi == 1.0 && yj == 0.0 {
                    pairs += 1.0;
                    wins += match scores[i].partial_cmp(&scores[j]).unwrap() {
                        std::cmp::Ordering::Greater => 1.0,
                        std::cmp::Ordering::Equal => 0.5,
                        std::cmp::Ordering::Less => 0.0,
                    };
                }
            }
        }
        wins / pairs
    }

    #[test]
    fn auc_examples() {
        assert_eq!(auc(&[0.9, 0.1], &[1.0, 0.0]).unwrap(), 1.0);
        assert_eq!(auc(&[0.4; 6], &[1.0, 0.0, 1.0, 0.0, 0.0, 1.0]).unwrap(), 0.5);
        assert_eq!(auc(&[0.1, 0.9], &[1.0, 0.0]).unwrap(), 0.0);
    }

    #[test]
    fn auc_matches_pairwise_oracle_with_ties() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..3 {
            // coarse scores force many ties
            let scores: Vec<f64> = (0..1000).map(|_| (rng.random_range(0.0..1.0f64) * 20.0).floor() / 20.0).collect();
            let labels: Vec<f64> = (0..1000).map(|_| if rng.random_bool(0.4) { 1.0 } else { 0.0 }).collect();
            let got = auc(&scores, &labels).unwrap();
            assert!((got - pairwise_auc(&scores, &labels)).abs() <= 1e-12);
        }
    }

    #[test]
    fn auc_errors() {
        assert!(matches!(auc(&[0.1, 0.2], &[1.0, 1.0]), Err(Error::UndefinedAuc(_))));
        assert!(matches!(auc(&[], &[]), Err(Error::UndefinedAuc(_))));
        assert!(matches!(auc(&[0.1], &[1.0, 0.0]), Err(Error::Dimension(_))));
        assert!(matches!(auc(&[f64::NAN, 0.2], &[1.0, 0.0]), Err(Error::Numeric(_))));
    }

    #[test]
    fn rela_impr_examples() {
        let plain = rela_impr(0.7270, 0.6585, RelaImprMode::PlainRelative).unwrap();
        assert!((plain - 10.40).abs() <= 0.01);
        let above = rela_impr(0.7270, 0.6585, RelaImprMode::AboveRandom).unwrap();
        assert!((above - 43.2).abs() <= 0.05);
        for mode in [RelaImprMode::PlainRelative, RelaImprMode::AboveRandom] {
            assert_eq!(rela_impr(0.61, 0.61, mode).unwrap(), 0.0);
        }
        assert!(rela_impr(0.7, 0.5, RelaImprMode::AboveRandom).is_err());
        assert!(rela_impr(0.7, 0.0, RelaImprMode::PlainRelative).is_err());
    }

    #[test]
    fn bce_examples() {
        assert!((bce(&[0.5; 4], &[1.0, 0.0, 0.0, 1.0]).unwrap() - std::f64::consts::LN_2).abs() <= 1e-15);
        assert!(bce(&[1.0, 0.0], &[1.0, 0.0]).unwrap() < 1e-11);
        let expected = -(0.8f64.ln() + (1.0 - 0.3f64).ln()) / 2.0;
        assert!((bce(&[0.8, 0.3], &[1.0, 0.0]).unwrap() - expected).abs() <= 1e-15);
        assert!(bce(&[], &[]).is_err());
    }

    #[test]
    fn total_loss_examples() {
        assert_eq!(total_loss(0.7, -6.0, 0.4, 0.0, 0.0), 0.7);
        assert!((total_loss(0.0, -6.0, 0.0, 0.1, 0.0) + 0.6).abs() <= 1e-15);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let v: [f64; 5] = std::array::from_fn(|_| rng.random_range(-2.0..2.0));
            assert_eq!(total_loss(v[0], v[1], v[2], v[3], v[4]), v[0] + v[3] * v[1] + v[4] * v[2]);
        }
    }
}
