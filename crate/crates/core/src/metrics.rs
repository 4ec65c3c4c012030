//! Pixel-level agreement between a predicted and a ground-truth mask.
//!
//! Every score is evaluated in exact rational arithmetic from the confusion tally and
//! converted to `f64` once, so algebraically equal formulations agree bit-for-bit.

use num_rational::Ratio;
use num_traits::ToPrimitive;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::grid::BinaryMask;

type Q = Ratio<i128>;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn new(tp: u64, fp: u64, tn: u64, fn_: u64) -> Self {
        Self { tp, fp, tn, fn_ }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }
}

impl std::ops::Add for ConfusionCounts {
    type Output = Self;

    fn add(self, rhs: Self) -> Self {
        Self {
            tp: self.tp + rhs.tp,
            fp: self.fp + rhs.fp,
            tn: self.tn + rhs.tn,
            fn_: self.fn_ + rhs.fn_,
        }
    }
}

impl std::iter::Sum for ConfusionCounts {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(Self::default(), |a, b| a + b)
    }
}

/// Per-pixel tally with foreground as the positive class.
pub fn confusion(pred: &BinaryMask, gt: &BinaryMask) -> Result<ConfusionCounts> {
    gt.check_dims(pred)?;
    let mut counts = ConfusionCounts::default();
    for (&p, &g) in pred.as_array().iter().zip(gt.as_array().iter()) {
        match (p, g) {
            (true, true) => counts.tp += 1,
            (true, false) => counts.fp += 1,
            (false, false) => counts.tn += 1,
            (false, true) => counts.fn_ += 1,
        }
    }
    Ok(counts)
}

/// An overlap score; `empty_agreement` marks the 0/0 case where both masks are empty and the
/// value is defined as 1.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Score {
    pub value: f64,
    pub empty_agreement: bool,
}

fn q(v: u64) -> Q {
    Q::from_integer(v as i128)
}

fn to_f64(v: Q) -> f64 {
    v.to_f64().expect("bounded rational converts to f64")
}

/// Dice = 2TP / (2TP + FP + FN).
pub fn dice(c: &ConfusionCounts) -> Score {
    let den = 2 * c.tp + c.fp + c.fn_;
    if den == 0 {
        return Score {
            value: 1.0,
            empty_agreement: true,
        };
    }
    Score {
        value: to_f64(Q::new(2 * c.tp as i128, den as i128)),
        empty_agreement: false,
    }
}

/// IoU = TP / (TP + FP + FN).
pub fn iou(c: &ConfusionCounts) -> Score {
    let den = c.tp + c.fp + c.fn_;
    if den == 0 {
        return Score {
            value: 1.0,
            empty_agreement: true,
        };
    }
    Score {
        value: to_f64(Q::new(c.tp as i128, den as i128)),
        empty_agreement: false,
    }
}

/// Intermediate terms of Cohen's kappa.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KappaBreakdown {
    pub p_o: f64,
    pub p_correct: f64,
    pub p_incorrect: f64,
    pub p_e: f64,
    pub kappa: f64,
    /// `p_e == 1` (or an empty tally): kappa is undefined and reported as 0.
    pub degenerate: bool,
}

/// Exact rational kappa terms: `(p_o, p_correct, p_incorrect, p_e, kappa)`.
pub fn kappa_exact(c: &ConfusionCounts) -> Option<(Q, Q, Q, Q, Option<Q>)> {
    let total = c.total();
    if total == 0 {
        return None;
    }
    let t = q(total);
    let p_o = (q(c.tp) + q(c.tn)) / t;
    let p_correct = ((q(c.tp) + q(c.fn_)) / t) * ((q(c.tp) + q(c.fp)) / t);
    let p_incorrect = ((q(c.fp) + q(c.tn)) / t) * ((q(c.fn_) + q(c.tn)) / t);
    let p_e = p_correct + p_incorrect;
    let one = Q::from_integer(1);
    let kappa = (p_e != one).then(|| (p_o - p_e) / (one - p_e));
    Some((p_o, p_correct, p_incorrect, p_e, kappa))
}

/// K = (P_o − P_e) / (1 − P_e) with P_e = P_correct + P_incorrect.
pub fn kappa(c: &ConfusionCounts) -> KappaBreakdown {
    match kappa_exact(c) {
        None => KappaBreakdown {
            p_o: 0.0,
            p_correct: 0.0,
            p_incorrect: 0.0,
            p_e: 0.0,
            kappa: 0.0,
            degenerate: true,
        },
        Some((p_o, p_correct, p_incorrect, p_e, k)) => KappaBreakdown {
            p_o: to_f64(p_o),
            p_correct: to_f64(p_correct),
            p_incorrect: to_f64(p_incorrect),
            p_e: to_f64(p_e),
            kappa: k.map(to_f64).unwrap_or(0.0),
            degenerate: k.is_none(),
        },
    }
}

/// Dice, IoU and kappa for one mask pair, with their degeneracy flags.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskScores {
    pub counts: ConfusionCounts,
    pub dice: f64,
    pub iou: f64,
    pub kappa: f64,
    pub empty_agreement: bool,
    pub kappa_degenerate: bool,
}

impl MaskScores {
    pub fn from_counts(counts: ConfusionCounts) -> Self {
        let d = dice(&counts);
        let j = iou(&counts);
        let k = kappa(&counts);
        Self {
            counts,
            dice: d.value,
            iou: j.value,
            kappa: k.kappa,
            empty_agreement: d.empty_agreement,
            kappa_degenerate: k.degenerate,
        }
    }

    pub fn compare(pred: &BinaryMask, gt: &BinaryMask) -> Result<Self> {
        Ok(Self::from_counts(confusion(pred, gt)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn worked() -> ConfusionCounts {
        ConfusionCounts::new(2, 1, 4, 1)
    }

    #[test]
    fn confusion_on_hand_built_fixture() {
        // pred: 1 1 1 0 | 0 0 0 0 ; gt: 1 1 0 1 | 0 0 0 0
        let pred = BinaryMask::from_fn(2, 4, |(r, c)| r == 0 && c < 3);
        let gt = BinaryMask::from_fn(2, 4, |(r, c)| r == 0 && c != 2);
        assert_eq!(confusion(&pred, &gt).unwrap(), worked());
    }

    #[test]
    fn confusion_extremes() {
        let ones = BinaryMask::full(4, 4);
        let c = confusion(&ones, &ones).unwrap();
        assert_eq!(c, ConfusionCounts::new(16, 0, 0, 0));

        let gt = BinaryMask::from_fn(4, 4, |(r, c)| (r + c) % 2 == 0);
        let c = confusion(&gt.complement(), &gt).unwrap();
        assert_eq!((c.tp, c.tn), (0, 0));
        assert_eq!(c.total(), 16);
    }

    #[test]
    fn confusion_rejects_dim_mismatch() {
        assert!(confusion(&BinaryMask::new(2, 2), &BinaryMask::new(2, 3)).is_err());
    }

    #[test]
    fn dice_and_iou_worked_values() {
        assert_eq!(dice(&worked()).value, 4.0 / 6.0);
        assert_eq!(iou(&worked()).value, 0.5);
        let same = ConfusionCounts::new(5, 0, 11, 0);
        assert_eq!(dice(&same).value, 1.0);
        assert_eq!(iou(&same).value, 1.0);
        let disjoint = ConfusionCounts::new(0, 3, 10, 3);
        assert_eq!(dice(&disjoint).value, 0.0);
        assert_eq!(iou(&disjoint).value, 0.0);
    }

    #[test]
    fn empty_vs_empty_is_flagged_one() {
        let c = ConfusionCounts::new(0, 0, 9, 0);
        assert_eq!(
            dice(&c),
            Score {
                value: 1.0,
                empty_agreement: true
            }
        );
        assert!(iou(&c).empty_agreement);
        let k = kappa(&c);
        assert!(k.degenerate);
        assert_eq!(k.kappa, 0.0);
    }

    #[test]
    fn kappa_worked_fixture() {
        let k = kappa(&worked());
        assert_eq!(k.p_o, 0.75);
        assert_eq!(k.p_correct, 9.0 / 64.0);
        assert_eq!(k.p_incorrect, 25.0 / 64.0);
        assert_eq!(k.p_e, 34.0 / 64.0);
        assert!((k.kappa - 0.21875 / 0.46875).abs() < 1e-12);
        assert!(!k.degenerate);
    }

    #[test]
    fn kappa_perfect_and_chance() {
        assert_eq!(kappa(&ConfusionCounts::new(6, 0, 10, 0)).kappa, 1.0);
        // 4x4: gt has 8 foreground pixels, pred has 8, overlapping on 4 -> p_o = p_e = 1/2.
        let gt = BinaryMask::from_fn(4, 4, |(r, _)| r < 2);
        let pred = BinaryMask::from_fn(4, 4, |(_, c)| c < 2);
        let k = kappa(&confusion(&pred, &gt).unwrap());
        assert_eq!(k.p_o, k.p_e);
        assert_eq!(k.kappa, 0.0);
    }

    #[test]
    fn eq6_eq7_grouping_matches_textbook_marginals() {
        // Textbook: p_e = p(pred=1)p(gt=1) + p(pred=0)p(gt=0).
        for c in [worked(), ConfusionCounts::new(7, 3, 1, 9), ConfusionCounts::new(0, 5, 5, 0)] {
            let (_, pc, pi, pe, _) = kappa_exact(&c).unwrap();
            let t = q(c.total());
            let pred_pos = (q(c.tp) + q(c.fp)) / t;
            let gt_pos = (q(c.tp) + q(c.fn_)) / t;
            let one = Q::from_integer(1);
            assert_eq!(pc, pred_pos * gt_pos);
            assert_eq!(pi, (one - pred_pos) * (one - gt_pos));
            assert_eq!(pe, pc + pi);
        }
    }

    #[test]
    fn pooled_sum() {
        let s: ConfusionCounts = [worked(), worked()].into_iter().sum();
        assert_eq!(s, ConfusionCounts::new(4, 2, 8, 2));
    }
}
