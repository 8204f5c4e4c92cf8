//! Independent reference implementations used as test oracles. Nothing here
//! calls into the library's kernels or metric code.
#![allow(dead_code)]

use bccseg_core::rng::{seeded, Rng};
use bccseg_core::tensor::{Tape, Tensor, Var};
use rand::Rng as _;

pub fn rng(seed: u64) -> Rng {
    seeded(seed)
}

pub fn random_tensor(rng: &mut Rng, shape: [usize; 4]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_, _, _, _| rng.random_range(-1.0..1.0))
}

/// Direct seven-loop convolution. Weight is `(C_out, C_in / groups, k, k)`.
#[allow(clippy::too_many_arguments)]
pub fn naive_conv(
    input: &Tensor<f64>,
    weight: &Tensor<f64>,
    stride: usize,
    padding: usize,
    dilation: usize,
    groups: usize,
) -> Tensor<f64> {
    let [n, cin, h, w] = dims(input);
    let [cout, cpg, k, _] = dims(weight);
    let span = dilation * (k - 1) + 1;
    let oh = (h + 2 * padding - span) / stride + 1;
    let ow = (w + 2 * padding - span) / stride + 1;
    let out_per_group = cout / groups;
    assert_eq!(cpg * groups, cin);
    Tensor::from_fn([n, cout, oh, ow], |b, oc, oy, ox| {
        let g = oc / out_per_group;
        let mut acc = 0.0;
        for ic in 0..cpg {
            for ky in 0..k {
                for kx in 0..k {
                    let iy = (oy * stride + ky * dilation) as isize - padding as isize;
                    let ix = (ox * stride + kx * dilation) as isize - padding as isize;
                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                        continue;
                    }
                    acc += input.at(b, g * cpg + ic, iy as usize, ix as usize) * weight.at(oc, ic, ky, kx);
                }
            }
        }
        acc
    })
}

/// Kernel of size `d(k-1)+1` with the original taps on a `d`-spaced grid.
pub fn zero_inflate<T: bccseg_core::tensor::Element>(weight: &Tensor<T>, dilation: usize) -> Tensor<T> {
    let [co, ci, k, _] = dims(weight);
    let big = dilation * (k - 1) + 1;
    Tensor::from_fn([co, ci, big, big], |o, i, y, x| {
        if y % dilation == 0 && x % dilation == 0 {
            weight.at(o, i, y / dilation, x / dilation)
        } else {
            T::zero()
        }
    })
}

pub fn dims<T: bccseg_core::tensor::Element>(t: &Tensor<T>) -> [usize; 4] {
    let s = t.shape();
    [s.n, s.c, s.h, s.w]
}

/// Mann–Whitney statistic: fraction of (positive, negative) pairs ranked
/// correctly, ties counting one half.
pub fn pairwise_auc(scores: &[f64], labels: &[bool]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for (i, &si) in scores.iter().enumerate() {
        if !labels[i] {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if labels[j] {
                continue;
            }
            pairs += 1.0;
            if si > sj {
                wins += 1.0;
            } else if si == sj {
                wins += 0.5;
            }
        }
    }
    wins / pairs
}

/// Average precision by enumeration: each positive contributes the precision
/// of the threshold equal to its own score, divided by the positive count.
pub fn step_ap(scores: &[f64], labels: &[bool]) -> f64 {
    let p = labels.iter().filter(|&&l| l).count() as f64;
    let mut ap = 0.0;
    for (i, &s) in scores.iter().enumerate() {
        if !labels[i] {
            continue;
        }
        let selected = scores.iter().filter(|&&t| t >= s).count() as f64;
        let hits = scores.iter().zip(labels).filter(|(&t, &l)| l && t >= s).count() as f64;
        ap += hits / selected;
    }
    ap / p
}

/// `(tp, fp, fn, tn)` by visiting every pixel of two row-major masks.
pub fn confusion_loop(pred: &[u8], truth: &[u8], w: usize, h: usize) -> (u64, u64, u64, u64) {
    let (mut tp, mut fp, mut fn_, mut tn) = (0, 0, 0, 0);
    for y in 0..h {
        for x in 0..w {
            let (p, t) = (pred[y * w + x] != 0, truth[y * w + x] != 0);
            if p && t {
                tp += 1;
            } else if p {
                fp += 1;
            } else if t {
                fn_ += 1;
            } else {
                tn += 1;
            }
        }
    }
    (tp, fp, fn_, tn)
}

pub const FD_STEP: f64 = 1e-5;
pub const FD_REL_TOL: f64 = 1e-4;
const FD_FLOOR: f64 = 1e-6;

/// Compares the tape gradient of the scalar built by `f` against central
/// differences for every element of every input. Returns the worst relative
/// error `|a - n| / max(|a|, |n|, floor)`.
pub fn gradcheck(inputs: &[Tensor<f64>], f: impl Fn(&mut Tape<f64>, &[Var]) -> Var) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = f(&mut tape, &vars);
    tape.backward(loss).expect("backward");
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .map(|&v| tape.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(tape.value(v).shape())))
        .collect();

    let eval = |ins: &[Tensor<f64>]| {
        let mut t = Tape::new();
        let vs: Vec<Var> = ins.iter().map(|x| t.constant(x.clone())).collect();
        let l = f(&mut t, &vs);
        t.value(l).item()
    };
    let mut worst: f64 = 0.0;
    let mut probe = inputs.to_vec();
    for (i, grad) in analytic.iter().enumerate() {
        for j in 0..probe[i].numel() {
            let orig = probe[i].data()[j];
            probe[i].data_mut()[j] = orig + FD_STEP;
            let up = eval(&probe);
            probe[i].data_mut()[j] = orig - FD_STEP;
            let down = eval(&probe);
            probe[i].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            let a = grad.data()[j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(FD_FLOOR);
            worst = worst.max(rel);
        }
    }
    worst
}
