//! ROC, AUC, HTER and the equal-error-rate threshold.
//!
//! Scores are live probabilities; a sample is accepted as live when its
//! score is at or above the threshold.

use serde::{Deserialize, Serialize};

use crate::error::{AmelError, Result};

/// One operating point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub threshold: f64,
    /// Spoof accepted as live over spoof count.
    pub far: f64,
    /// Live rejected over live count.
    pub frr: f64,
}

/// Scored sample: `live` is the ground truth.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scored {
    pub score: f64,
    pub live: bool,
}

pub fn scored(scores: &[f64], labels: &[usize]) -> Vec<Scored> {
    scores
        .iter()
        .zip(labels)
        .map(|(&score, &l)| Scored { score, live: l == 1 })
        .collect()
}

fn class_counts(scores: &[Scored]) -> Result<(usize, usize)> {
    if scores.iter().any(|s| !s.score.is_finite()) {
        return Err(AmelError::NonFinite("score".into()));
    }
    let live = scores.iter().filter(|s| s.live).count();
    let spoof = scores.len() - live;
    if live == 0 || spoof == 0 {
        return Err(AmelError::InvalidArgument {
            op: "roc",
            detail: format!("both classes required ({} live, {} spoof)", live, spoof),
        });
    }
    Ok((live, spoof))
}

/// FAR and FRR at one threshold.
pub fn rates_at(scores: &[Scored], threshold: f64) -> Result<(f64, f64)> {
    let (live, spoof) = class_counts(scores)?;
    let fa = scores.iter().filter(|s| !s.live && s.score >= threshold).count();
    let fr = scores.iter().filter(|s| s.live && s.score < threshold).count();
    Ok((fa as f64 / spoof as f64, fr as f64 / live as f64))
}

/// Operating points at every distinct score plus one above the maximum,
/// in increasing threshold order. FAR is non-increasing along the list.
pub fn roc(scores: &[Scored]) -> Result<Vec<RocPoint>> {
    let (live, spoof) = class_counts(scores)?;
    let mut sorted: Vec<Scored> = scores.to_vec();
    sorted.sort_by(|a, b| a.score.total_cmp(&b.score));
    let mut points = Vec::new();
    // below index i everything is rejected
    let (mut live_below, mut spoof_below) = (0usize, 0usize);
    let mut i = 0;
    while i < sorted.len() {
        let t = sorted[i].score;
        points.push(RocPoint {
            threshold: t,
            far: (spoof - spoof_below) as f64 / spoof as f64,
            frr: live_below as f64 / live as f64,
        });
        while i < sorted.len() && sorted[i].score == t {
            if sorted[i].live {
                live_below += 1;
            } else {
                spoof_below += 1;
            }
            i += 1;
        }
    }
    let top = sorted.last().expect("non-empty").score;
    points.push(RocPoint {
        threshold: if top < f64::MAX { next_up(top) } else { f64::INFINITY },
        far: 0.0,
        frr: 1.0,
    });
    Ok(points)
}

fn next_up(x: f64) -> f64 {
    if x == 0.0 {
        return f64::from_bits(1);
    }
    let bits = x.to_bits();
    f64::from_bits(if x > 0.0 { bits + 1 } else { bits - 1 })
}

/// Trapezoidal area under TPR = 1 - FRR against FPR = FAR.
pub fn auc(scores: &[Scored]) -> Result<f64> {
    let pts = roc(scores)?;
    let mut area = 0.0;
    for w in pts.windows(2) {
        let (x0, y0) = (w[0].far, 1.0 - w[0].frr);
        let (x1, y1) = (w[1].far, 1.0 - w[1].frr);
        area += (x0 - x1) * (y0 + y1) / 2.0;
    }
    Ok(area)
}

pub fn hter(scores: &[Scored], threshold: f64) -> Result<f64> {
    let (far, frr) = rates_at(scores, threshold)?;
    Ok((far + frr) / 2.0)
}

/// Threshold minimising `|FAR - FRR|` over the ROC points; ties go to the
/// lower threshold.
pub fn eer_threshold(scores: &[Scored]) -> Result<f64> {
    let pts = roc(scores)?;
    let mut best = pts[0];
    for p in &pts[1..] {
        if (p.far - p.frr).abs() < (best.far - best.frr).abs() {
            best = *p;
        }
    }
    Ok(best.threshold)
}

/// Equal error rate: mean of FAR and FRR at the EER threshold.
pub fn eer(scores: &[Scored]) -> Result<f64> {
    hter(scores, eer_threshold(scores)?)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn set(pairs: &[(f64, bool)]) -> Vec<Scored> {
        pairs.iter().map(|&(score, live)| Scored { score, live }).collect()
    }

    fn hand_set() -> Vec<Scored> {
        set(&[(0.9, true), (0.8, false), (0.7, true), (0.1, false)])
    }

    /// Rank statistic with half credit for ties.
    fn mann_whitney(s: &[Scored]) -> f64 {
        let (mut wins, mut pairs) = (0.0, 0.0);
        for a in s.iter().filter(|x| x.live) {
            for b in s.iter().filter(|x| !x.live) {
                pairs += 1.0;
                if a.score > b.score {
                    wins += 1.0;
                } else if a.score == b.score {
                    wins += 0.5;
                }
            }
        }
        wins / pairs
    }

    /// Every threshold in a grid covering the scores, evaluated directly.
    fn brute_force(s: &[Scored]) -> Vec<(f64, f64, f64)> {
        let live = s.iter().filter(|x| x.live).count() as f64;
        let spoof = s.len() as f64 - live;
        let mut ts: Vec<f64> = s.iter().map(|x| x.score).collect();
        ts.push(1.0);
        ts.sort_by(f64::total_cmp);
        ts.dedup();
        ts.iter()
            .map(|&t| {
                let fa = s.iter().filter(|x| !x.live && x.score >= t).count() as f64;
                let fr = s.iter().filter(|x| x.live && x.score < t).count() as f64;
                (t, fa / spoof, fr / live)
            })
            .collect()
    }

    #[test]
    fn hand_set_matches_enumeration() {
        let s = hand_set();
        let pts = roc(&s).unwrap();
        let brute = brute_force(&s);
        assert_eq!(pts.len(), brute.len());
        for (p, (t, far, frr)) in pts.iter().zip(&brute) {
            if p.threshold <= 0.9 {
                assert_eq!(p.threshold, *t);
            }
            assert_eq!((p.far, p.frr), (*far, *frr));
        }
        // thresholds 0.1, 0.7, 0.8, 0.9, above
        let table: Vec<(f64, f64)> = pts.iter().map(|p| (p.far, p.frr)).collect();
        assert_eq!(table, vec![(1.0, 0.0), (0.5, 0.0), (0.5, 0.5), (0.0, 0.5), (0.0, 1.0)]);

        let t = eer_threshold(&s).unwrap();
        let best = brute
            .iter()
            .map(|&(t, far, frr)| ((far - frr).abs(), t, (far + frr) / 2.0))
            .fold((f64::MAX, 0.0, 0.0), |acc, x| if x.0 < acc.0 { x } else { acc });
        assert_eq!(t, best.1);
        assert_eq!(hter(&s, t).unwrap(), best.2);
        assert_eq!(auc(&s).unwrap(), 0.75);
    }

    #[test]
    fn perfect_separation() {
        let s = set(&[(0.9, true), (0.8, true), (0.3, false), (0.2, false)]);
        assert_eq!(auc(&s).unwrap(), 1.0);
        let pts = roc(&s).unwrap();
        assert!(pts.iter().any(|p| p.far == 0.0 && p.frr == 0.0));
        assert_eq!(hter(&s, eer_threshold(&s).unwrap()).unwrap(), 0.0);
    }

    #[test]
    fn constant_scores_are_degenerate() {
        let s = set(&[(0.5, true), (0.5, false), (0.5, true), (0.5, false)]);
        for p in roc(&s).unwrap() {
            assert!((p.far, p.frr) == (1.0, 0.0) || (p.far, p.frr) == (0.0, 1.0));
        }
        assert_eq!(hter(&s, eer_threshold(&s).unwrap()).unwrap(), 0.5);
        assert_eq!(auc(&s).unwrap(), 0.5);
    }

    #[test]
    fn single_class_is_an_error() {
        let s = set(&[(0.5, true), (0.6, true)]);
        assert!(roc(&s).is_err());
        assert!(auc(&s).is_err());
        assert!(hter(&s, 0.5).is_err());
    }

    #[test]
    fn random_labels_give_chance_auc() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s: Vec<Scored> = (0..20_000)
            .map(|_| Scored {
                score: rng.gen(),
                live: rng.gen(),
            })
            .collect();
        assert!((auc(&s).unwrap() - 0.5).abs() < 0.05);
    }

    #[test]
    fn auc_equals_rank_statistic() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let n = rng.gen_range(2..60);
            let mut s: Vec<Scored> = (0..n)
                .map(|_| Scored {
                    // coarse grid to force ties
                    score: (rng.gen_range(0..12) as f64) / 11.0,
                    live: rng.gen(),
                })
                .collect();
            s[0].live = true;
            s[1].live = false;
            assert!((auc(&s).unwrap() - mann_whitney(&s)).abs() < 1e-9);
        }
    }

    proptest! {
        #[test]
        fn auc_invariant_under_monotone_transform(
            raw in prop::collection::vec((0.0f64..1.0, any::<bool>()), 2..40)
        ) {
            let mut s: Vec<Scored> = raw.iter().map(|&(score, live)| Scored { score, live }).collect();
            s[0].live = true;
            s[1].live = false;
            let t: Vec<Scored> = s.iter().map(|x| Scored { score: (3.0 * x.score).exp() - 7.0, live: x.live }).collect();
            prop_assert!((auc(&s).unwrap() - auc(&t).unwrap()).abs() < 1e-12);
        }

        #[test]
        fn far_is_non_increasing_and_eer_is_close(
            raw in prop::collection::vec((0.0f64..1.0, any::<bool>()), 2..40)
        ) {
            let mut s: Vec<Scored> = raw.iter().map(|&(score, live)| Scored { score, live }).collect();
            s[0].live = true;
            s[1].live = false;
            let pts = roc(&s).unwrap();
            for w in pts.windows(2) {
                prop_assert!(w[1].threshold > w[0].threshold);
                prop_assert!(w[1].far <= w[0].far);
                prop_assert!(w[1].frr >= w[0].frr);
            }
            let a = auc(&s).unwrap();
            prop_assert!((0.0..=1.0).contains(&a));
            // HTER at the EER threshold is within one grid step of the
            // crossing: |FAR - FRR| there is no larger than one step of either rate
            let live = s.iter().filter(|x| x.live).count() as f64;
            let spoof = s.len() as f64 - live;
            let t = eer_threshold(&s).unwrap();
            let (far, frr) = rates_at(&s, t).unwrap();
            prop_assert!((far - frr).abs() <= 1.0 / live + 1.0 / spoof + 1e-12);
        }
    }
}
