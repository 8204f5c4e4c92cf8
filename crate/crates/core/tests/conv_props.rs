//! Convolution against a direct loop oracle, atrous equivalence and linearity.

mod common;

use bccseg_core::opcount::{regular_conv_macs, separable_conv_macs, separable_ratio};
use bccseg_core::tensor::{conv2d, conv_output_dim, depthwise_separable_conv, ConvParams, Tape, Tensor};
use common::{naive_conv, random_tensor, rng, zero_inflate};
use proptest::prelude::*;
use rand::Rng as _;

fn max_abs_diff(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn max_rel_diff(a: &Tensor<f32>, b: &Tensor<f32>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    let scale = a.data().iter().map(|x| x.abs()).fold(0.0f32, f32::max).max(1.0) as f64;
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs() as f64 / scale).fold(0.0, f64::max)
}

#[test]
fn atrous_equals_zero_inflated_kernel() {
    let mut r = rng(11);
    for case in 0..50 {
        let groups: usize = [1, 2][r.random_range(0..2)];
        let cin = groups * r.random_range(1..3);
        let cout = groups * r.random_range(1..3);
        let k: usize = [1, 3][r.random_range(0..2)];
        let dilation = r.random_range(2..5);
        let stride = r.random_range(1..3);
        let padding = r.random_range(0..=dilation * (k - 1));
        let span = dilation * (k - 1) + 1;
        let h = r.random_range(span.saturating_sub(2 * padding).max(1)..span + 8);
        let w = r.random_range(span.saturating_sub(2 * padding).max(1)..span + 8);

        let x64 = random_tensor(&mut r, [1, cin, h, w]);
        let w64 = random_tensor(&mut r, [cout, cin / groups, k, k]);
        let atrous = ConvParams::new(stride, padding, dilation, groups);
        let dense = ConvParams::new(stride, padding, 1, groups);

        let a = conv2d(&x64, &w64, None, atrous).unwrap();
        let b = conv2d(&x64, &zero_inflate(&w64, dilation), None, dense).unwrap();
        assert_eq!(a.data(), b.data(), "case {case}: f64 atrous differs from inflated kernel");

        let (x32, w32) = (x64.cast::<f32>(), w64.cast::<f32>());
        let a = conv2d(&x32, &w32, None, atrous).unwrap();
        let b = conv2d(&x32, &zero_inflate(&w32, dilation), None, dense).unwrap();
        let rel = max_rel_diff(&a, &b);
        assert!(rel <= 1e-6, "case {case}: f32 relative difference {rel:.3e}");
    }
}

#[test]
fn matches_direct_loop() {
    let mut r = rng(12);
    for case in 0..40 {
        let groups = [1, 2, 3][r.random_range(0..3)];
        let cin = groups * r.random_range(1..3);
        let cout = groups * r.random_range(1..3);
        let k = r.random_range(1..4);
        let (s, d) = (r.random_range(1..3), r.random_range(1..3));
        let p = r.random_range(0..3);
        let span = d * (k - 1) + 1;
        let (h, w) = (span + r.random_range(0..6), span + r.random_range(0..6));
        let x = random_tensor(&mut r, [2, cin, h, w]);
        let wt = random_tensor(&mut r, [cout, cin / groups, k, k]);
        let got = conv2d(&x, &wt, None, ConvParams::new(s, p, d, groups)).unwrap();
        let want = naive_conv(&x, &wt, s, p, d, groups);
        assert!(max_abs_diff(&got, &want) < 1e-12, "case {case}");
    }
}

#[test]
fn tape_counts_padded_taps() {
    let mut r = rng(13);
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(random_tensor(&mut r, [2, 4, 9, 7]));
    let w = tape.constant(random_tensor(&mut r, [6, 2, 3, 3]));
    let y = tape.conv2d(x, w, None, ConvParams::new(2, 2, 2, 2)).unwrap();
    let s = tape.value(y).shape();
    let expected = (s.n * s.c * s.h * s.w * 2 * 9) as u64;
    assert_eq!(tape.macs(), expected);
}

#[test]
fn separable_is_depthwise_then_pointwise_oracle() {
    let mut r = rng(14);
    let x = random_tensor(&mut r, [1, 3, 8, 9]);
    let dw = random_tensor(&mut r, [3, 1, 3, 3]);
    let pw = random_tensor(&mut r, [5, 3, 1, 1]);
    let got = depthwise_separable_conv(&x, &dw, &pw, None, 2, 2, 2).unwrap();
    let mid = naive_conv(&x, &dw, 2, 2, 2, 3);
    let want = naive_conv(&mid, &pw, 1, 0, 1, 1);
    assert!(max_abs_diff(&got, &want) < 1e-12);
}

#[test]
fn worked_separable_cost() {
    let regular = regular_conv_macs(32, 32, 3, 64, 128);
    let separable = separable_conv_macs(32, 32, 3, 64, 128);
    assert_eq!(regular, 75_497_472);
    assert_eq!(separable, 589_824 + 8_388_608);
    let ratio = separable as f64 / regular as f64;
    assert!((ratio - (1.0 / 128.0 + 1.0 / 9.0)).abs() < 1e-12);
    assert!((separable_ratio(3, 128) - ratio).abs() < 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn conv_is_linear_in_input(seed in any::<u64>(), alpha in -3.0f64..3.0, beta in -3.0f64..3.0) {
        let mut r = rng(seed);
        let a = random_tensor(&mut r, [1, 2, 6, 5]);
        let b = random_tensor(&mut r, [1, 2, 6, 5]);
        let w = random_tensor(&mut r, [3, 2, 3, 3]);
        let p = ConvParams::new(1, 2, 2, 1);
        let mix = Tensor::from_fn([1, 2, 6, 5], |n, c, h, x| alpha * a.at(n, c, h, x) + beta * b.at(n, c, h, x));
        let lhs = conv2d(&mix, &w, None, p).unwrap();
        let (ca, cb) = (conv2d(&a, &w, None, p).unwrap(), conv2d(&b, &w, None, p).unwrap());
        let rhs = Tensor::from_fn(lhs.shape(), |n, c, h, x| alpha * ca.at(n, c, h, x) + beta * cb.at(n, c, h, x));
        prop_assert!(max_abs_diff(&lhs, &rhs) < 1e-10);
    }

    #[test]
    fn output_dim_formula(len in 1usize..200, k in 1usize..8, s in 1usize..5, p in 0usize..10, d in 1usize..6) {
        let span = d * (k - 1) + 1;
        let got = conv_output_dim(len, k, s, p, d);
        if len + 2 * p >= span {
            prop_assert_eq!(got, Some((len + 2 * p - span) / s + 1));
        } else {
            prop_assert_eq!(got, None);
        }
    }

    #[test]
    fn ratio_matches_closed_form(h in 1u64..64, w in 1u64..64, k in 1u64..8, cin in 1u64..256, cout in 1u64..256) {
        let ratio = separable_conv_macs(h, w, k, cin, cout) as f64 / regular_conv_macs(h, w, k, cin, cout) as f64;
        prop_assert!((ratio - separable_ratio(k, cout)).abs() < 1e-12);
    }
}
