use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::Vec2;

fn dist(a: Vec2, b: Vec2) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

fn check_lengths(pred: &[Vec2], gt: &[Vec2]) -> Result<()> {
    if pred.len() != gt.len() {
        return Err(Error::Dimension(format!(
            "prediction has {} steps, ground truth {}",
            pred.len(),
            gt.len()
        )));
    }
    if gt.is_empty() {
        return Err(Error::Dimension("empty trajectory".into()));
    }
    Ok(())
}

/// Mean pointwise euclidean distance.
pub fn ade(pred: &[Vec2], gt: &[Vec2]) -> Result<f64> {
    check_lengths(pred, gt)?;
    Ok(pred.iter().zip(gt).map(|(&p, &g)| dist(p, g)).sum::<f64>() / gt.len() as f64)
}

/// Distance at the final step.
pub fn fde(pred: &[Vec2], gt: &[Vec2]) -> Result<f64> {
    check_lengths(pred, gt)?;
    Ok(dist(pred[pred.len() - 1], gt[gt.len() - 1]))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionRule {
    /// Pick the candidate with the lowest ADE and report both metrics from it.
    #[default]
    MinAde,
    /// Pick the candidate with the lowest FDE and report both metrics from it.
    MinFde,
    /// Report the lowest ADE and the lowest FDE, possibly from different candidates.
    Independent,
}

impl SelectionRule {
    pub fn as_str(self) -> &'static str {
        match self {
            SelectionRule::MinAde => "min_ade",
            SelectionRule::MinFde => "min_fde",
            SelectionRule::Independent => "independent",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BestOfK {
    pub ade: f64,
    pub fde: f64,
    pub k: usize,
    /// Chosen candidate; for the independent rule, the min-ADE one.
    pub index: usize,
}

/// Best of `preds` against `gt`. Ties go to the lower index.
pub fn best_of_k(preds: &[Vec<Vec2>], gt: &[Vec2], rule: SelectionRule) -> Result<BestOfK> {
    if preds.is_empty() {
        return Err(Error::Input("best-of-K needs at least one prediction".into()));
    }
    let scores: Vec<(f64, f64)> = preds
        .iter()
        .map(|p| Ok((ade(p, gt)?, fde(p, gt)?)))
        .collect::<Result<_>>()?;
    let argmin = |key: &dyn Fn(&(f64, f64)) -> f64| {
        let mut best = 0;
        for (k, s) in scores.iter().enumerate() {
            if key(s) < key(&scores[best]) {
                best = k;
            }
        }
        best
    };
    let by_ade = argmin(&|s| s.0);
    let (ade, fde, index) = match rule {
        SelectionRule::MinAde => (scores[by_ade].0, scores[by_ade].1, by_ade),
        SelectionRule::MinFde => {
            let k = argmin(&|s| s.1);
            (scores[k].0, scores[k].1, k)
        }
        SelectionRule::Independent => (scores[by_ade].0, scores[argmin(&|s| s.1)].1, by_ade),
    };
    Ok(BestOfK {
        ade,
        fde,
        k: preds.len(),
        index,
    })
}

/// Extrapolates the last observed displacement for `pred_len` steps.
pub fn constant_velocity(past: &[Vec2], pred_len: usize) -> Vec<Vec2> {
    let Some(&last) = past.last() else {
        return vec![[0.0, 0.0]; pred_len];
    };
    let v = if past.len() >= 2 {
        let prev = past[past.len() - 2];
        [last[0] - prev[0], last[1] - prev[1]]
    } else {
        [0.0, 0.0]
    };
    (1..=pred_len)
        .map(|t| [last[0] + v[0] * t as f64, last[1] + v[1] * t as f64])
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_traj(rng: &mut ChaCha8Rng, n: usize) -> Vec<Vec2> {
        (0..n).map(|_| [rng.random_range(-10.0..10.0), rng.random_range(-10.0..10.0)]).collect()
    }

    #[test]
    fn identity_and_offset() {
        let gt: Vec<Vec2> = (0..12).map(|t| [t as f64, 0.5 * t as f64]).collect();
        assert_eq!(ade(&gt, &gt).unwrap(), 0.0);
        assert_eq!(fde(&gt, &gt).unwrap(), 0.0);
        let shifted: Vec<Vec2> = gt.iter().map(|p| [p[0], p[1] + 1.0]).collect();
        assert!((ade(&shifted, &gt).unwrap() - 1.0).abs() < 1e-12);
        assert!((fde(&shifted, &gt).unwrap() - 1.0).abs() < 1e-12);
        assert!(matches!(ade(&gt[..11], &gt), Err(Error::Dimension(_))));
    }

    #[test]
    fn best_of_k_degenerate_and_containment() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let gt = random_traj(&mut rng, 12);
        let p = random_traj(&mut rng, 12);
        let one = best_of_k(std::slice::from_ref(&p), &gt, SelectionRule::MinAde).unwrap();
        assert_eq!((one.ade, one.fde), (ade(&p, &gt).unwrap(), fde(&p, &gt).unwrap()));
        let two = best_of_k(&[p, gt.clone()], &gt, SelectionRule::MinAde).unwrap();
        assert_eq!((two.ade, two.fde, two.index), (0.0, 0.0, 1));
        assert!(matches!(best_of_k(&[], &gt, SelectionRule::MinAde), Err(Error::Input(_))));
    }

    #[test]
    fn rules_differ_where_they_should() {
        let gt = vec![[0.0, 0.0], [0.0, 0.0]];
        // a: small ADE, large FDE; b: large ADE, zero FDE.
        let a = vec![[0.0, 0.0], [1.0, 0.0]];
        let b = vec![[3.0, 0.0], [0.0, 0.0]];
        let preds = [a, b];
        let r = best_of_k(&preds, &gt, SelectionRule::MinAde).unwrap();
        assert_eq!((r.ade, r.fde), (0.5, 1.0));
        let r = best_of_k(&preds, &gt, SelectionRule::MinFde).unwrap();
        assert_eq!((r.ade, r.fde), (1.5, 0.0));
        let r = best_of_k(&preds, &gt, SelectionRule::Independent).unwrap();
        assert_eq!((r.ade, r.fde), (0.5, 0.0));
    }

    #[test]
    fn constant_velocity_extrapolates() {
        let cv = constant_velocity(&[[0.0, 0.0], [1.0, 2.0]], 3);
        assert_eq!(cv, vec![[2.0, 4.0], [3.0, 6.0], [4.0, 8.0]]);
        assert_eq!(constant_velocity(&[[5.0, 5.0]], 2), vec![[5.0, 5.0]; 2]);
    }

    proptest! {
        #[test]
        fn best_never_exceeds_any_candidate(seed in 0u64..500, k in 1usize..8) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let gt = random_traj(&mut rng, 12);
            let preds: Vec<_> = (0..k).map(|_| random_traj(&mut rng, 12)).collect();
            let r = best_of_k(&preds, &gt, SelectionRule::MinAde).unwrap();
            for p in &preds {
                prop_assert!(r.ade <= ade(p, &gt).unwrap());
            }
            let r = best_of_k(&preds, &gt, SelectionRule::MinFde).unwrap();
            for p in &preds {
                prop_assert!(r.fde <= fde(p, &gt).unwrap());
            }
        }
    }
}
