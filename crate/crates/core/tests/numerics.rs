mod common;

use common::{conv3d_ref, Nd};
use proptest::prelude::*;
use pulmo_core::numerics::{
    conv2d, conv3d, conv3d_depthwise, linear, maxpool2d, maxpool2d_with_indices, softmax_slice,
};
use pulmo_core::Tensor;

fn tensor(shape: &[usize], data: Vec<f32>) -> Tensor {
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn vals(n: usize) -> impl Strategy<Value = Vec<f32>> {
    prop::collection::vec(-2.0f32..2.0, n)
}

fn close(a: f64, b: f64, rtol: f64) -> bool {
    (a - b).abs() <= rtol * a.abs().max(b.abs()).max(1.0)
}

/// `(input [C,T,H,W], kernels [F,C,kt,kh,kw], stride, pad)` with valid geometry.
fn conv_case() -> impl Strategy<Value = (Tensor, Tensor, [usize; 3], [usize; 3])> {
    (
        1usize..3,
        1usize..4,
        2usize..6,
        3usize..8,
        3usize..8,
        1usize..4,
        1usize..4,
        1usize..3,
    )
        .prop_flat_map(|(c, f, t, h, w, kt, kh, s)| {
            let kt = kt.min(t);
            let (kh, kw) = (kh.min(h), kh.min(w));
            (
                vals(c * t * h * w),
                vals(f * c * kt * kh * kw),
                0usize..2,
                Just((c, f, t, h, w, kt, kh, kw, s)),
            )
        })
        .prop_map(|(x, k, p, (c, f, t, h, w, kt, kh, kw, s))| {
            (
                tensor(&[c, t, h, w], x),
                tensor(&[f, c, kt, kh, kw], k),
                [1, s, s],
                [p.min(kt - 1), p, p],
            )
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn conv3d_matches_naive_loops((x, k, stride, pad) in conv_case()) {
        let got = conv3d(&x, &k, stride, pad).unwrap();
        let kd: Vec<f64> = k.data().iter().map(|&v| v.into()).collect();
        let want = conv3d_ref(&Nd::from_tensor(&x), &kd, k.shape(), stride, pad, false);
        prop_assert_eq!(got.shape(), &want.shape[..]);
        for (g, w) in got.data().iter().zip(&want.data) {
            prop_assert!(close(f64::from(*g), *w, 1e-5), "{} vs {}", g, w);
        }
    }

    #[test]
    fn depthwise_matches_naive_loops((x, k, stride, pad) in conv_case()) {
        let c = x.dim(0);
        let ks = k.shape();
        let k = tensor(&[c, 1, ks[2], ks[3], ks[4]], k.data()[..c * ks[2] * ks[3] * ks[4]].to_vec());
        let got = conv3d_depthwise(&x, &k, stride, pad).unwrap();
        let kd: Vec<f64> = k.data().iter().map(|&v| v.into()).collect();
        let want = conv3d_ref(&Nd::from_tensor(&x), &kd, k.shape(), stride, pad, true);
        for (g, w) in got.data().iter().zip(&want.data) {
            prop_assert!(close(f64::from(*g), *w, 1e-5), "{} vs {}", g, w);
        }
    }

    #[test]
    fn delta_kernel_shifts(x in vals(2 * 7 * 8), dy in 0usize..3, dx in 0usize..3) {
        let x = tensor(&[2, 7, 8], x);
        // one filter per channel pair, delta at (dy, dx) on the diagonal
        let k = Tensor::from_fn(&[2, 2, 3, 3], |i| {
            let (f, c, r) = (i / 18, (i / 9) % 2, i % 9);
            if f == c && r == dy * 3 + dx { 1.0 } else { 0.0 }
        });
        let y = conv2d(&x, &k, 1, 0).unwrap();
        prop_assert_eq!(y.shape(), &[2, 5, 6]);
        for c in 0..2 {
            for i in 0..5 {
                for j in 0..6 {
                    prop_assert_eq!(y.at(&[c, i, j]), x.at(&[c, i + dy, j + dx]));
                }
            }
        }
    }

    #[test]
    fn conv_is_linear(
        (x, k, stride, pad) in conv_case(),
        seed in vals(64),
        a in -3.0f32..3.0,
        b in -3.0f32..3.0,
    ) {
        let y = Tensor::from_fn(x.shape(), |i| seed[i % 64] * ((i % 7) as f32 - 3.0) / 3.0);
        let mix = Tensor::from_fn(x.shape(), |i| a * x.data()[i] + b * y.data()[i]);
        let lhs = conv3d(&mix, &k, stride, pad).unwrap();
        let ox = conv3d(&x, &k, stride, pad).unwrap();
        let oy = conv3d(&y, &k, stride, pad).unwrap();
        let scale = lhs.data().iter().chain(ox.data()).fold(1.0f32, |m, v| m.max(v.abs()));
        for i in 0..lhs.len() {
            let rhs = a * ox.data()[i] + b * oy.data()[i];
            prop_assert!(
                (lhs.data()[i] - rhs).abs() <= 1e-5 * scale * (1.0 + a.abs() + b.abs()),
                "{} vs {}", lhs.data()[i], rhs
            );
        }
    }

    #[test]
    fn maxpool_equals_window_max(x in vals(3 * 8 * 6), k in 1usize..4, s in 1usize..4) {
        let x = tensor(&[3, 8, 6], x);
        let (y, idx) = maxpool2d_with_indices(&x, k, s).unwrap();
        let global = x.max();
        let (oh, ow) = (y.dim(1), y.dim(2));
        for c in 0..3 {
            for i in 0..oh {
                for j in 0..ow {
                    let mut m = f32::NEG_INFINITY;
                    for a in 0..k {
                        for b in 0..k {
                            m = m.max(x.at(&[c, i * s + a, j * s + b]));
                        }
                    }
                    let v = y.at(&[c, i, j]);
                    prop_assert_eq!(v, m);
                    prop_assert!(v <= global);
                    prop_assert_eq!(x.data()[idx[(c * oh + i) * ow + j]], v);
                }
            }
        }
        prop_assert_eq!(maxpool2d(&x, k, s).unwrap(), y);
    }

    #[test]
    fn softmax_shift_invariant(x in prop::collection::vec(-20.0f32..20.0, 1..12), c in -50.0f32..50.0) {
        let p = softmax_slice(&x).unwrap();
        let shifted: Vec<f32> = x.iter().map(|v| v + c).collect();
        let q = softmax_slice(&shifted).unwrap();
        for (a, b) in p.iter().zip(&q) {
            prop_assert!((a - b).abs() <= 1e-6, "{} vs {}", a, b);
        }
        prop_assert!((p.iter().sum::<f32>() - 1.0).abs() <= 1e-6);
    }

    #[test]
    fn linear_matches_dot_products(w in vals(12), b in vals(3), x in vals(4)) {
        let y = linear(&Tensor::vector(x.clone()), &tensor(&[3, 4], w.clone()), &Tensor::vector(b.clone())).unwrap();
        for o in 0..3 {
            let want: f64 = f64::from(b[o]) + (0..4).map(|i| f64::from(w[o * 4 + i]) * f64::from(x[i])).sum::<f64>();
            prop_assert!(close(f64::from(y.data()[o]), want, 1e-6));
        }
    }
}

#[test]
fn shape_mismatches_are_errors() {
    let x = Tensor::zeros(&[2, 4, 5, 5]);
    let k = Tensor::zeros(&[3, 1, 3, 3, 3]);
    assert!(conv3d(&x, &k, [1, 1, 1], [0, 0, 0]).is_err());
    let big = Tensor::zeros(&[1, 2, 6, 6, 6]);
    assert!(conv3d(&x, &big, [1, 1, 1], [0, 0, 0]).is_err());
    assert!(conv3d(&x, &Tensor::zeros(&[1, 2, 1, 1, 1]), [1, 0, 1], [0, 0, 0]).is_err());
    assert!(linear(
        &Tensor::vector(vec![1.0; 3]),
        &Tensor::zeros(&[2, 4]),
        &Tensor::zeros(&[2])
    )
    .is_err());
    assert!(softmax_slice(&[]).is_err());
}
