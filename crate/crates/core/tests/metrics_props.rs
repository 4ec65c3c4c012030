use ksam_core::metrics::{confusion, dice, iou, kappa, ConfusionCounts, MaskScores};
use ksam_core::BinaryMask;
use proptest::prelude::*;

const SIDE: usize = 8;

fn mask() -> impl Strategy<Value = BinaryMask> {
    proptest::collection::vec(any::<bool>(), SIDE * SIDE).prop_map(|bits| {
        BinaryMask::from_fn(SIDE, SIDE, |(r, c)| bits[r * SIDE + c])
    })
}

// Scores from set cardinalities only, each as one integer division.
struct SetOracle {
    dice: f64,
    iou: f64,
    kappa: Option<f64>,
}

fn set_oracle(a: &BinaryMask, b: &BinaryMask) -> SetOracle {
    let sa: std::collections::BTreeSet<_> = a.ones().into_iter().collect();
    let sb: std::collections::BTreeSet<_> = b.ones().into_iter().collect();
    let n = (SIDE * SIDE) as i128;
    let inter = sa.intersection(&sb).count() as i128;
    let union = sa.union(&sb).count() as i128;
    let (na, nb) = (sa.len() as i128, sb.len() as i128);
    let agree = inter + (n - union);
    let chance = na * nb + (n - na) * (n - nb);
    SetOracle {
        dice: if na + nb == 0 { 1.0 } else { (2 * inter) as f64 / (na + nb) as f64 },
        iou: if union == 0 { 1.0 } else { inter as f64 / union as f64 },
        kappa: (n * n != chance).then(|| (n * agree - chance) as f64 / (n * n - chance) as f64),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn metrics_match_set_oracle(a in mask(), b in mask()) {
        let s = MaskScores::compare(&a, &b).unwrap();
        let o = set_oracle(&a, &b);
        prop_assert_eq!(s.dice, o.dice);
        prop_assert_eq!(s.iou, o.iou);
        match o.kappa {
            Some(k) => prop_assert_eq!(s.kappa, k),
            None => prop_assert!(s.kappa_degenerate && s.kappa == 0.0),
        }
        prop_assert_eq!(s.counts.total(), (SIDE * SIDE) as u64);
    }

    #[test]
    fn ranges_and_dice_iou_identity(a in mask(), b in mask()) {
        let s = MaskScores::compare(&a, &b).unwrap();
        prop_assert!((0.0..=1.0).contains(&s.dice));
        prop_assert!((0.0..=1.0).contains(&s.iou));
        prop_assert!((-1.0..=1.0).contains(&s.kappa));
        prop_assert!(s.dice >= s.iou);
        prop_assert!((s.dice - 2.0 * s.iou / (1.0 + s.iou)).abs() <= 1e-12);
    }

    #[test]
    fn symmetric_in_argument_order(a in mask(), b in mask()) {
        let ab = MaskScores::compare(&a, &b).unwrap();
        let ba = MaskScores::compare(&b, &a).unwrap();
        prop_assert_eq!(ab.dice, ba.dice);
        prop_assert_eq!(ab.iou, ba.iou);
        prop_assert_eq!(ab.kappa, ba.kappa);
    }

    #[test]
    fn kappa_breakdown_is_consistent(tp in 0u64..50, fp in 0u64..50, tn in 0u64..50, fn_ in 0u64..50) {
        let c = ConfusionCounts::new(tp, fp, tn, fn_);
        prop_assume!(c.total() > 0);
        let k = kappa(&c);
        prop_assert!((k.p_e - (k.p_correct + k.p_incorrect)).abs() <= 1e-15);
        prop_assert!((0.0..=1.0).contains(&k.p_o));
        if !k.degenerate {
            prop_assert!((k.kappa - (k.p_o - k.p_e) / (1.0 - k.p_e)).abs() <= 1e-12);
        }
    }
}

#[test]
fn confusion_examples() {
    let ones = BinaryMask::full(4, 4);
    assert_eq!(confusion(&ones, &ones).unwrap(), ConfusionCounts::new(16, 0, 0, 0));
    let gt = BinaryMask::from_fn(4, 4, |(r, c)| (r + c) % 3 == 0);
    let c = confusion(&gt.complement(), &gt).unwrap();
    assert_eq!((c.tp, c.tn), (0, 0));
    assert!(confusion(&ones, &BinaryMask::new(4, 5)).is_err());
}

#[test]
fn empty_masks_agree_with_flag() {
    let e = BinaryMask::new(3, 3);
    let c = confusion(&e, &e).unwrap();
    assert_eq!(dice(&c).value, 1.0);
    assert!(dice(&c).empty_agreement);
    assert!(iou(&c).empty_agreement);
    let k = kappa(&c);
    assert!(k.degenerate);
    assert_eq!(k.kappa, 0.0);
}
