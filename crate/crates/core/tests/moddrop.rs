use clotseg::data::{Modality, Volume};
use clotseg::moddrop::{apply, mask_missing, sample_retention, schedule_value, DropoutSchedule, RetentionSample};
use clotseg::Grid3;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn sched(p: f64, sigma: f64) -> DropoutSchedule {
    DropoutSchedule { keep_prob: p, total_epochs: 100, noise_sigma: sigma, droppable: vec![Modality::Phase.index()] }
}

fn volume(seed: u64) -> Volume {
    let mut v = seed as f32 * 0.1;
    let mut ch = || {
        Grid3::from_fn([3, 3, 2], |_, _, _| {
            v = (v * 1.7 + 0.3) % 5.0;
            v
        })
    };
    Volume::multimodal([ch(), ch(), ch()], [1.0; 3], Vec::new())
}

fn channel(v: &Volume, m: Modality) -> &[f32] {
    v.channel(m.name()).unwrap().data()
}

/// Reference schedule in exact rational arithmetic.
fn oracle(t: usize, total: usize) -> f64 {
    let q = 4 * t;
    [0.75, 0.5, 0.25, 0.0][(q / total).min(3)]
}

#[test]
fn schedule_matches_quarter_table() {
    for total in [1usize, 3, 4, 7, 100, 1000] {
        for t in 0..total {
            assert_eq!(schedule_value(t, total).unwrap(), oracle(t, total), "t={t} T={total}");
        }
        assert!(schedule_value(total, total).is_err());
    }
}

#[test]
fn keep_all_and_drop_all() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for t in [0, 50, 99] {
        let s = sample_retention(&sched(1.0, 0.01), t, 3, &mut rng).unwrap();
        assert_eq!(s, RetentionSample::ones(3));
    }
    let s = sample_retention(&sched(0.0, 0.0), 80, 3, &mut rng).unwrap();
    assert_eq!(s.retention, vec![1.0, 1.0, 0.0]);
    assert_eq!(s.keep, vec![true, true, false]);
}

#[test]
fn drop_rate_is_close_to_one_minus_p() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let draws = 10_000;
    let dropped = (0..draws)
        .filter(|_| !sample_retention(&sched(0.5, 0.01), 10, 3, &mut rng).unwrap().keep[2])
        .count();
    let rate = dropped as f64 / draws as f64;
    assert!((rate - 0.5).abs() <= 0.02, "{rate}");
}

#[test]
fn apply_examples() {
    let x = volume(3);
    assert_eq!(apply(&x, &RetentionSample::ones(3)).unwrap(), x);
    let half = RetentionSample { keep: vec![true, true, false], retention: vec![1.0, 1.0, 0.5] };
    let y = apply(&x, &half).unwrap();
    for (a, b) in channel(&y, Modality::Phase).iter().zip(channel(&x, Modality::Phase)) {
        assert_eq!(*a, b * 0.5);
    }
    let zero = RetentionSample { keep: vec![true, true, false], retention: vec![1.0, 1.0, 0.0] };
    let y = apply(&x, &zero).unwrap();
    assert!(channel(&y, Modality::Phase).iter().all(|&v| v == 0.0));
    assert!(apply(&x, &RetentionSample::ones(2)).is_err());
}

#[test]
fn mask_missing_examples() {
    let x = volume(5);
    assert_eq!(mask_missing(&x, &[]).unwrap(), x);
    let phase = Modality::Phase.index();
    let y = mask_missing(&x, &[phase]).unwrap();
    assert!(channel(&y, Modality::Phase).iter().all(|&v| v == 0.0));
    for m in [Modality::Dwi, Modality::Swan] {
        assert_eq!(channel(&y, m), channel(&x, m));
    }
    assert_eq!(mask_missing(&y, &[phase]).unwrap(), y);
    assert!(mask_missing(&x, &[3]).is_err());
}

proptest! {
    #[test]
    fn schedule_is_non_increasing_and_ends_at_zero(total in 1usize..2000) {
        let mut prev = f64::INFINITY;
        for t in 0..total {
            let g = schedule_value(t, total).unwrap();
            prop_assert!(g <= prev);
            prev = g;
        }
        if total >= 4 {
            prop_assert_eq!(schedule_value(total - 1, total).unwrap(), 0.0);
        }
    }

    #[test]
    fn retention_invariants(seed in any::<u64>(), p in 0.0f64..=1.0, t in 0usize..100) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = sample_retention(&sched(p, 0.01), t, 3, &mut rng).unwrap();
        for j in 0..3 {
            if s.keep[j] {
                prop_assert_eq!(s.retention[j], 1.0);
            } else {
                prop_assert!((0.0..=1.0).contains(&s.retention[j]));
            }
        }
        prop_assert!(s.keep[0] && s.keep[1]);
    }

    #[test]
    fn noiseless_sampling_is_reproducible(seed in any::<u64>(), t in 0usize..100) {
        let draw = || sample_retention(&sched(0.5, 0.0), t, 3, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert_eq!(draw(), draw());
    }

    #[test]
    fn apply_commutes_with_scaling(seed in 0u64..100, alpha in 0.1f32..4.0, r in 0.0f64..=1.0) {
        let x = volume(seed);
        let mut scaled = x.clone();
        for c in &mut scaled.channels {
            c.data_mut().iter_mut().for_each(|v| *v *= alpha);
        }
        let s = RetentionSample { keep: vec![true, false, false], retention: vec![1.0, r, 0.5] };
        let lhs = apply(&scaled, &s).unwrap();
        let rhs = apply(&x, &s).unwrap();
        for m in Modality::ALL {
            for (a, b) in channel(&lhs, m).iter().zip(channel(&rhs, m)) {
                prop_assert!((a - alpha * b).abs() <= 1e-5 * (1.0 + a.abs()));
            }
        }
    }
}
