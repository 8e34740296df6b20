use hpsnet::nn::kernels;
use hpsnet::{Shape4, Tape, Tensor4};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: impl Into<Shape4>, seed: u64) -> Tensor4 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor4::from_fn(shape, |_, _, _, _| rng.gen_range(-1.0..1.0))
}

// Direct six-loop convolution with zero padding.
fn naive_conv(x: &Tensor4, w: &Tensor4, b: &Tensor4, stride: usize, pad: usize) -> Tensor4 {
    let (xs, ws) = (x.shape(), w.shape());
    let oh = (xs.h + 2 * pad - ws.h) / stride + 1;
    let ow = (xs.w + 2 * pad - ws.w) / stride + 1;
    Tensor4::from_fn((xs.n, ws.n, oh, ow), |n, o, i, j| {
        let mut acc = b.at(0, o, 0, 0);
        for c in 0..xs.c {
            for ki in 0..ws.h {
                for kj in 0..ws.w {
                    let (y, x_) = ((i * stride + ki) as isize - pad as isize, (j * stride + kj) as isize - pad as isize);
                    if y >= 0 && x_ >= 0 && (y as usize) < xs.h && (x_ as usize) < xs.w {
                        acc += x.at(n, c, y as usize, x_ as usize) * w.at(o, c, ki, kj);
                    }
                }
            }
        }
        acc
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn conv_matches_naive_loops(
        n in 1usize..3, c in 1usize..5, o in 1usize..5, h in 3usize..10, w in 3usize..10,
        k in prop::sample::select(vec![1usize, 3]), stride in 1usize..3, seed in any::<u64>(),
    ) {
        let pad = k / 2;
        let x = random((n, c, h, w), seed);
        let wt = random((o, c, k, k), seed ^ 1);
        let b = random((1, o, 1, 1), seed ^ 2);
        let fast = kernels::conv2d_forward(&x, &wt, &b, stride, pad).unwrap();
        let slow = naive_conv(&x, &wt, &b, stride, pad);
        prop_assert_eq!(fast.shape(), slow.shape());
        prop_assert!(fast.max_abs_diff(&slow) <= 1e-12);
    }

    #[test]
    fn softmax_rows_sum_to_one(c in 1usize..6, seed in any::<u64>()) {
        let x = random((2, c, 3, 3), seed).map(|v| 30.0 * v);
        let y = kernels::softmax_channels(&x);
        for n in 0..2 {
            for p in 0..9 {
                let s: f64 = (0..c).map(|ch| y.plane(n, ch)[p]).sum();
                prop_assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn nearest_resize_to_own_size_is_identity(h in 1usize..9, w in 1usize..9, seed in any::<u64>()) {
        let x = random((1, 2, h, w), seed);
        prop_assert_eq!(kernels::resize_nearest(&x, h, w), x);
    }
}

#[test]
fn detach_passes_values_and_blocks_gradient() {
    let mut tape = Tape::new();
    let x = tape.param(random((1, 2, 3, 3), 5));
    let d = tape.detach(x);
    assert_eq!(tape.value(d), tape.value(x));
    let y = tape.square(d);
    let z = tape.add(y, x).unwrap();
    let loss = tape.sum(z);
    let g = tape.backward(loss).unwrap();
    assert_eq!(g.wrt(x), Tensor4::ones((1, 2, 3, 3)));
}

#[test]
fn avgpool_halves_and_averages() {
    let x = Tensor4::new((1, 1, 2, 4), vec![1.0, 3.0, 5.0, 7.0, 1.0, 3.0, 5.0, 7.0]).unwrap();
    let y = kernels::avgpool2(&x);
    assert_eq!(y.data(), &[2.0, 6.0]);
}
