use clotseg::gradsuite::project;
use clotseg::tensor::{grad_check, io, Graph, Padding, Tensor, Var};
use clotseg::{Error, Result};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn rand_t(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

fn positive(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(0.5..2.0))
}

/// Random values on a grid of distinct levels, so no pooling window has ties.
fn distinct(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut v: Vec<f64> = (0..n).map(|i| i as f64 * 0.01 - 0.3).collect();
    for i in (1..n).rev() {
        v.swap(i, rng.random_range(0..=i));
    }
    Tensor::new(shape.to_vec(), v).unwrap()
}

type Build = fn(&mut Graph<f64>, &[Var]) -> Result<Var>;
type Inputs = fn(&mut ChaCha8Rng) -> Vec<Tensor<f64>>;

fn cases() -> Vec<(&'static str, Inputs, Build)> {
    vec![
        ("add", |r| vec![rand_t(&[3, 4], r), rand_t(&[3, 4], r)], |g, v| g.add(v[0], v[1])),
        ("sub", |r| vec![rand_t(&[3, 4], r), rand_t(&[3, 4], r)], |g, v| g.sub(v[0], v[1])),
        ("mul", |r| vec![rand_t(&[3, 4], r), rand_t(&[3, 4], r)], |g, v| g.mul(v[0], v[1])),
        ("div", |r| vec![rand_t(&[3, 4], r), positive(&[3, 4], r)], |g, v| g.div(v[0], v[1])),
        ("scale", |r| vec![rand_t(&[5], r)], |g, v| g.scale(v[0], -1.7)),
        ("add_scalar", |r| vec![rand_t(&[5], r)], |g, v| g.add_scalar(v[0], 0.3)),
        ("scale_by", |r| vec![rand_t(&[2, 3], r), rand_t(&[1], r)], |g, v| g.scale_by(v[0], v[1])),
        ("matmul", |r| vec![rand_t(&[3, 4], r), rand_t(&[4, 2], r)], |g, v| g.matmul(v[0], v[1])),
        ("matmul batched", |r| vec![rand_t(&[2, 3, 4], r), rand_t(&[2, 4, 2], r)], |g, v| g.matmul(v[0], v[1])),
        ("matmul shared rhs", |r| vec![rand_t(&[2, 3, 4], r), rand_t(&[4, 2], r)], |g, v| g.matmul(v[0], v[1])),
        ("transpose", |r| vec![rand_t(&[2, 3, 4], r)], |g, v| g.transpose(v[0])),
        ("reshape", |r| vec![rand_t(&[2, 6], r)], |g, v| g.reshape(v[0], &[3, 4])),
        (
            "conv2d same",
            |r| vec![rand_t(&[2, 5, 5], r), rand_t(&[3, 2, 3, 3], r), rand_t(&[3], r)],
            |g, v| g.conv2d(v[0], v[1], Some(v[2]), 1, Padding::Same),
        ),
        (
            "conv2d strided valid",
            |r| vec![rand_t(&[2, 6, 6], r), rand_t(&[2, 2, 2, 2], r)],
            |g, v| g.conv2d(v[0], v[1], None, 2, Padding::Valid),
        ),
        ("maxpool_window", |r| vec![distinct(&[2, 5, 5], r)], |g, v| g.maxpool_window(v[0], 3)),
        ("maxpool_channels", |r| vec![distinct(&[3, 4, 4], r)], |g, v| g.maxpool_channels(v[0], &[1, 2, 4])),
        ("softmax", |r| vec![rand_t(&[3, 5], r)], |g, v| g.softmax_lastdim(v[0])),
        ("log_softmax", |r| vec![rand_t(&[3, 5], r)], |g, v| g.log_softmax_lastdim(v[0])),
        ("layer_norm", |r| vec![rand_t(&[3, 5], r)], |g, v| g.layer_norm(v[0], 1e-5)),
        (
            "affine",
            |r| vec![rand_t(&[3, 4], r), rand_t(&[4], r), rand_t(&[4], r)],
            |g, v| g.affine_lastdim(v[0], v[1], v[2]),
        ),
        ("add_row_bias", |r| vec![rand_t(&[3, 4], r), rand_t(&[4], r)], |g, v| g.add_row_bias(v[0], v[1])),
        ("relu", |r| vec![rand_t(&[4, 4], r)], |g, v| g.relu(v[0])),
        ("elu", |r| vec![rand_t(&[4, 4], r)], |g, v| g.elu(v[0])),
        ("tanh", |r| vec![rand_t(&[4, 4], r)], |g, v| g.tanh(v[0])),
        ("sigmoid", |r| vec![rand_t(&[4, 4], r)], |g, v| g.sigmoid(v[0])),
        ("exp", |r| vec![rand_t(&[4, 4], r)], |g, v| g.exp(v[0])),
        ("ln", |r| vec![positive(&[4, 4], r)], |g, v| g.ln(v[0])),
        ("resize_nearest", |r| vec![rand_t(&[2, 2, 3], r)], |g, v| g.resize_nearest(v[0], 3)),
        ("concat", |r| vec![rand_t(&[1, 3], r), rand_t(&[2, 3], r)], |g, v| g.concat(&[v[0], v[1], v[0]])),
        ("slice", |r| vec![rand_t(&[5, 2], r)], |g, v| g.slice(v[0], 1, 3)),
        ("gather_rows", |r| vec![rand_t(&[3, 2], r)], |g, v| g.gather_rows(v[0], &[2, 0, 0, 1, 2])),
        ("sum", |r| vec![rand_t(&[3, 2], r)], |g, v| g.sum(v[0])),
        ("mean", |r| vec![rand_t(&[3, 2], r)], |g, v| g.mean(v[0])),
    ]
}

#[test]
fn every_op_passes_grad_check_on_five_seeds() {
    for (name, inputs, build) in cases() {
        for seed in 0..5u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let xs = inputs(&mut rng);
            let report = grad_check(&xs, H, None, |g, v| {
                let y = build(g, v)?;
                project(g, y, seed)
            })
            .unwrap();
            assert!(
                report.max_rel_error < TOL,
                "{name} seed {seed}: {:e} at {:?}",
                report.max_rel_error,
                report.worst
            );
        }
    }
}

#[test]
fn matmul_hand_case_and_error_message() {
    let mut g = Graph::<f64>::new();
    let a = g.constant(Tensor::new([2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let b = g.constant(Tensor::new([2, 1], vec![5.0, 6.0]).unwrap());
    let c = g.matmul(a, b).unwrap();
    assert_eq!(g.value(c).data(), &[17.0, 39.0]);
    let bad = g.constant(Tensor::zeros([3, 1]));
    let msg = g.matmul(a, bad).unwrap_err().to_string();
    assert!(msg.contains("[2, 2]") && msg.contains("[3, 1]"), "{msg}");
}

#[test]
fn conv_patch_embedding_shape_law() {
    let mut g = Graph::<f64>::new();
    for (k, t) in [(2, 3), (4, 2), (3, 5)] {
        let x = g.constant(Tensor::zeros([1, k * t, k * t]));
        let w = g.constant(Tensor::zeros([2, 1, k, k]));
        let y = g.conv2d(x, w, None, k, Padding::Valid).unwrap();
        assert_eq!(g.shape(y), &[2, t, t]);
    }
    let x = g.constant(Tensor::zeros([1, 4, 4]));
    let w = g.constant(Tensor::zeros([1, 1, 3, 3]));
    assert!(g.conv2d(x, w, None, 0, Padding::Same).is_err());
}

#[test]
fn conv_delta_gives_box() {
    let mut g = Graph::<f64>::new();
    let mut d = Tensor::zeros([1, 5, 5]);
    d.data_mut()[12] = 1.0;
    let x = g.constant(d);
    let w = g.constant(Tensor::ones([1, 1, 3, 3]));
    let y = g.conv2d(x, w, None, 1, Padding::Same).unwrap();
    for r in 0..5 {
        for c in 0..5 {
            let inside = (1..=3).contains(&r) && (1..=3).contains(&c);
            assert_eq!(g.value(y).at(&[0, r, c]), if inside { 1.0 } else { 0.0 });
        }
    }
}

#[test]
fn maxpool_examples() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::new([1, 1, 4], vec![0.0, 5.0, 0.0, 0.0]).unwrap());
    let y = g.maxpool_window(x, 3).unwrap();
    assert_eq!(g.value(y).data(), &[5.0, 5.0, 5.0, 0.0]);
    let one = g.maxpool_window(x, 1).unwrap();
    assert_eq!(g.value(one), g.value(x));
    let c = g.constant(Tensor::full([2, 3, 3], 4.5));
    let y = g.maxpool_window(c, 2).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == 4.5));
    assert!(matches!(g.maxpool_window(x, 0), Err(Error::InvalidArgument(_))));
}

#[test]
fn maxpool_tie_gradient_goes_to_first_maximum() {
    let mut g = Graph::<f64>::new();
    let x = g.param(Tensor::new([1, 1, 3], vec![2.0, 2.0, 1.0]).unwrap());
    let y = g.maxpool_window(x, 3).unwrap();
    let s = g.sum(y).unwrap();
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[2.0, 1.0, 0.0]);
}

#[test]
fn softmax_examples() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::new([3, 2], vec![0.0, 0.0, 1000.0, 1000.0, 0.0, 3f64.ln()]).unwrap());
    let y = g.softmax_lastdim(x).unwrap();
    let v = g.value(y).data();
    assert_eq!(&v[..4], &[0.5, 0.5, 0.5, 0.5]);
    assert!((v[4] - 0.25).abs() < 1e-12 && (v[5] - 0.75).abs() < 1e-12);
    let t = g.constant(Tensor::zeros([1, 3]));
    let u = g.softmax_lastdim(t).unwrap();
    assert!(g.value(u).data().iter().all(|p| (p - 1.0 / 3.0).abs() < 1e-15));
}

#[test]
fn layer_norm_examples() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::new([2, 2], vec![1.0, 3.0, 7.0, 7.0]).unwrap());
    let y = g.layer_norm(x, 1e-5).unwrap();
    let v = g.value(y).data();
    assert!((v[0] + 1.0).abs() < 1e-5 && (v[1] - 1.0).abs() < 1e-5);
    assert_eq!(&v[2..], &[0.0, 0.0]);
}

#[test]
fn resize_examples() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::new([1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let same = g.resize_nearest(x, 1).unwrap();
    assert_eq!(g.value(same), g.value(x));
    let y = g.resize_nearest(x, 2).unwrap();
    let expect = [1., 1., 2., 2., 1., 1., 2., 2., 3., 3., 4., 4., 3., 3., 4., 4.];
    assert_eq!(g.value(y).data(), &expect);
    assert!(g.resize_nearest(x, 0).is_err());
}

#[test]
fn sum_of_squares_check_is_tight() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = rand_t(&[10], &mut rng);
    let r = grad_check(&[x], H, None, |g, v| {
        let sq = g.mul(v[0], v[0])?;
        g.sum(sq)
    })
    .unwrap();
    assert!(r.max_rel_error < 1e-8);
}

#[test]
fn non_finite_values_are_rejected_at_op_boundaries() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::new([1], vec![1000.0]).unwrap());
    assert!(matches!(g.exp(x), Err(Error::NonFinite { .. })));
    assert!(Tensor::new([1], vec![f64::INFINITY]).is_err());
}

fn brute_pool(x: &[f64], h: usize, w: usize, win: usize) -> Vec<f64> {
    let before = (win - 1) / 2;
    let after = win - 1 - before;
    let mut out = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            let mut m = f64::NEG_INFINITY;
            for rr in r.saturating_sub(before)..=(r + after).min(h - 1) {
                for cc in c.saturating_sub(before)..=(c + after).min(w - 1) {
                    m = m.max(x[rr * w + cc]);
                }
            }
            out[r * w + c] = m;
        }
    }
    out
}

/// Direct cross-correlation and its input gradient for an upstream `r`.
fn direct_conv(x: &Tensor<f64>, w: &Tensor<f64>, r: &[f64], stride: usize, pad: usize) -> (Vec<f64>, Vec<f64>) {
    let ([c, h, wd], [co, _, k, _]) = (
        <[usize; 3]>::try_from(x.shape()).unwrap(),
        <[usize; 4]>::try_from(w.shape()).unwrap(),
    );
    let (oh, ow) = ((h + 2 * pad - k) / stride + 1, (wd + 2 * pad - k) / stride + 1);
    let (xv, wv) = (x.data(), w.data());
    let mut y = vec![0.0; co * oh * ow];
    let mut dx = vec![0.0; xv.len()];
    for o in 0..co {
        for oy in 0..oh {
            for ox in 0..ow {
                let yi = (o * oh + oy) * ow + ox;
                for ci in 0..c {
                    for ky in 0..k {
                        for kx in 0..k {
                            let (iy, ix) = ((oy * stride + ky) as isize - pad as isize, (ox * stride + kx) as isize - pad as isize);
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                continue;
                            }
                            let xi = (ci * h + iy as usize) * wd + ix as usize;
                            let wi = ((o * c + ci) * k + ky) * k + kx;
                            y[yi] += xv[xi] * wv[wi];
                            dx[xi] += r[yi] * wv[wi];
                        }
                    }
                }
            }
        }
    }
    (y, dx)
}

proptest! {
    #[test]
    fn conv_matches_direct_loops(seed in any::<u64>(), k in 1usize..8, stride in 1usize..4, same in any::<bool>(), h in 1usize..9, wd in 1usize..9) {
        let k = if same { k | 1 } else { k };
        let pad = if same { (k - 1) / 2 } else { 0 };
        prop_assume!(h + 2 * pad >= k && wd + 2 * pad >= k);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (xt, wt) = (rand_t(&[2, h, wd], &mut rng), rand_t(&[3, 2, k, k], &mut rng));
        let mut g = Graph::<f64>::new();
        let (x, w) = (g.param(xt.clone()), g.constant(wt.clone()));
        let y = g.conv2d(x, w, None, stride, if same { Padding::Same } else { Padding::Valid }).unwrap();
        let r = rand_t(g.shape(y), &mut rng);
        let (expect_y, expect_dx) = direct_conv(&xt, &wt, r.data(), stride, pad);
        for (a, b) in g.value(y).data().iter().zip(&expect_y) {
            prop_assert!((a - b).abs() < 1e-12);
        }
        let rv = g.constant(r);
        let p = g.mul(y, rv).unwrap();
        let loss = g.sum(p).unwrap();
        let grads = g.backward(loss).unwrap();
        for (a, b) in grads.get(x).unwrap().data().iter().zip(&expect_dx) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_rows_are_distributions(vals in prop::collection::vec(-50.0f64..50.0, 12)) {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::new([3, 4], vals).unwrap());
        let y = g.softmax_lastdim(x).unwrap();
        for row in g.value(y).data().chunks(4) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            prop_assert!(row.iter().all(|p| (0.0..=1.0).contains(p)));
        }
    }

    #[test]
    fn layer_norm_rows_have_zero_mean(vals in prop::collection::vec(-10.0f64..10.0, 15)) {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::new([3, 5], vals).unwrap());
        let y = g.layer_norm(x, 1e-5).unwrap();
        for row in g.value(y).data().chunks(5) {
            prop_assert!((row.iter().sum::<f64>() / 5.0).abs() < 1e-6);
        }
    }

    #[test]
    fn maxpool_matches_brute_force(vals in prop::collection::vec(-5.0f64..5.0, 64), wi in 0usize..4) {
        let win = [1, 2, 3, 8][wi];
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::new([1, 8, 8], vals.clone()).unwrap());
        let y = g.maxpool_window(x, win).unwrap();
        let expect = brute_pool(&vals, 8, 8, win);
        prop_assert_eq!(g.value(y).data(), expect.as_slice());
    }

    #[test]
    fn resize_preserves_sum_times_factor_squared(vals in prop::collection::vec(-3.0f64..3.0, 8), f in 1usize..4) {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::new([2, 2, 2], vals).unwrap());
        let y = g.resize_nearest(x, f).unwrap();
        let expect = g.value(x).sum() * (f * f) as f64;
        prop_assert!((g.value(y).sum() - expect).abs() < 1e-9);
    }

    #[test]
    fn forward_is_bit_deterministic(seed in 0u64..1000) {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut g = Graph::<f64>::new();
            let x = g.constant(rand_t(&[2, 6, 6], &mut rng));
            let w = g.constant(rand_t(&[3, 2, 3, 3], &mut rng));
            let y = g.conv2d(x, w, None, 1, Padding::Same).unwrap();
            let y = g.softmax_lastdim(y).unwrap();
            g.value(y).clone()
        };
        prop_assert_eq!(run(), run());
    }

    #[test]
    fn cstn_roundtrip(vals in prop::collection::vec(-1e6f64..1e6, 1..40)) {
        let n = vals.len();
        let t = Tensor::new([n], vals).unwrap();
        prop_assert_eq!(io::decode::<f64>(&io::encode(&t)).unwrap(), t.clone());
        let t32 = t.cast::<f32>();
        prop_assert_eq!(io::decode::<f32>(&io::encode(&t32)).unwrap(), t32);
    }
}
