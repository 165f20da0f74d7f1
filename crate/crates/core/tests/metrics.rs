mod common;

use clotseg::metrics::{component_confusion, detection, dice, report_csv, score_patient, summarize, Confusion, CSV_HEADER};
use clotseg::Mask;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn mask(dims: [usize; 3], on: &[[usize; 3]]) -> Mask {
    let mut m = Mask::filled(dims, false);
    on.iter().for_each(|&[x, y, z]| m.set(x, y, z, true));
    m
}

fn cube(dims: [usize; 3], origin: [usize; 3], side: [usize; 3]) -> Mask {
    Mask::from_fn(dims, |x, y, z| {
        (0..3).all(|a| [x, y, z][a] >= origin[a] && [x, y, z][a] < origin[a] + side[a])
    })
}

fn union(a: &Mask, b: &Mask) -> Mask {
    Mask::from_vec(a.dims(), a.data().iter().zip(b.data()).map(|(&x, &y)| x || y).collect()).unwrap()
}

#[test]
fn dice_examples() {
    let d = [4, 4, 2];
    let g = mask(d, &[[0, 0, 0], [1, 0, 0]]);
    assert_eq!(dice(&g, &g).unwrap(), 1.0);
    assert_eq!(dice(&mask(d, &[[3, 3, 1]]), &g).unwrap(), 0.0);
    assert_eq!(dice(&mask(d, &[[1, 0, 0], [2, 0, 0]]), &g).unwrap(), 0.5);
    let empty = Mask::filled(d, false);
    assert_eq!(dice(&empty, &empty).unwrap(), 1.0);
    assert!(dice(&g, &Mask::filled([4, 4, 1], false)).is_err());
}

#[test]
fn confusion_examples() {
    let d = [12, 12, 4];
    let gt = cube(d, [0, 0, 0], [2, 2, 2]);
    assert_eq!(component_confusion(&gt, &gt).unwrap(), Confusion::default());
    let blob = cube(d, [6, 6, 0], [5, 3, 2]);
    let c = component_confusion(&union(&gt, &blob), &gt).unwrap();
    assert_eq!(c, Confusion { fp_count: 1.0, fp_size: 30.0, fn_count: 0.0, fn_size: 0.0 });
    let big = cube(d, [0, 0, 0], [5, 5, 2]);
    let c = component_confusion(&Mask::filled(d, false), &big).unwrap();
    assert_eq!(c, Confusion { fp_count: 0.0, fp_size: 0.0, fn_count: 1.0, fn_size: 50.0 });
}

#[test]
fn detection_examples() {
    let d = [4, 4, 1];
    let g = mask(d, &[[0, 0, 0], [1, 1, 0]]);
    assert_eq!(detection(&mask(d, &[[1, 1, 0], [3, 3, 0]]), &g).unwrap(), Some(true));
    assert_eq!(detection(&mask(d, &[[3, 3, 0]]), &g).unwrap(), Some(false));
    assert_eq!(detection(&Mask::filled(d, true), &g).unwrap(), Some(true));
    assert_eq!(detection(&g, &Mask::filled(d, false)).unwrap(), None);
}

#[test]
fn csv_report_and_summary() {
    let d = [4, 4, 1];
    let g = mask(d, &[[0, 0, 0]]);
    let scores = vec![
        score_patient("a", &g, &g).unwrap(),
        score_patient("b", &mask(d, &[[3, 3, 0]]), &g).unwrap(),
        score_patient("c", &Mask::filled(d, false), &Mask::filled(d, false)).unwrap(),
    ];
    let s = summarize(&scores).unwrap();
    assert_eq!(s.patients, 3);
    assert_eq!(s.detection_rate, Some(0.5));
    assert!((s.dice - 2.0 / 3.0).abs() < 1e-12);
    let csv = report_csv(&scores).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], CSV_HEADER);
    assert_eq!(lines.len(), 5);
    assert!(lines[1].starts_with("a,1.000000,") && lines[1].ends_with(",1"));
    assert!(lines[2].ends_with(",0"));
    assert!(lines[3].ends_with(",NA"));
    assert!(lines[4].starts_with("mean,"));
    assert!(summarize(&[]).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn dice_symmetry_flips_and_detection(seed in any::<u64>(), axis in 0usize..3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = common::random_mask([5, 4, 3], 0.3, &mut rng);
        let g = common::random_mask([5, 4, 3], 0.3, &mut rng);
        let d = dice(&p, &g).unwrap();
        prop_assert!((0.0..=1.0).contains(&d));
        prop_assert_eq!(d, dice(&g, &p).unwrap());
        let (mut pf, mut gf) = (p.clone(), g.clone());
        pf.flip(axis);
        gf.flip(axis);
        prop_assert_eq!(d, dice(&pf, &gf).unwrap());
        if detection(&p, &g).unwrap() == Some(true) {
            prop_assert!(d > 0.0);
        }
    }

    #[test]
    fn confusion_matches_pairwise_overlap(seed in any::<u64>(), dp in 0.02f64..0.3, dg in 0.02f64..0.3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = common::random_mask([6, 6, 4], dp, &mut rng);
        let g = common::random_mask([6, 6, 4], dg, &mut rng);
        let c = component_confusion(&p, &g).unwrap();
        prop_assert_eq!((c.fp_count, c.fp_size), common::unmatched_pairwise(&p, &g));
        prop_assert_eq!((c.fn_count, c.fn_size), common::unmatched_pairwise(&g, &p));
    }
}
