mod common;

use common::grad::thin_expansion;
use proptest::prelude::*;
use pulmo_core::optim::{Adam, AdamConfig, Parameterized};
use pulmo_core::stcnn::{
    build_net, cross_entropy, mha_fuse, train_step, Attention, CnnSample, ExpansionConfig,
    FusionConfig, FusionMode, HeadKind, Target, TargetScaler,
};
use pulmo_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn tokens(n: usize, d: usize, r: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(&[n, d], |_| r.random_range(-1.0f32..1.0))
}

fn params(exp: ExpansionConfig) -> usize {
    let fusion = FusionConfig::with_mode(FusionMode::Mha);
    build_net(exp, fusion, HeadKind::Regression, 1, 0)
        .unwrap()
        .param_count()
}

#[test]
fn parameter_count_grows_with_width_and_depth() {
    let base = ExpansionConfig::desk();
    for knob in ["gamma_w", "gamma_d"] {
        let counts: Vec<usize> = [0.5, 1.0, 2.0]
            .iter()
            .map(|&g| {
                let mut e = base;
                match knob {
                    "gamma_w" => e.gamma_w = g,
                    _ => e.gamma_d = g,
                }
                params(e)
            })
            .collect();
        assert!(counts.windows(2).all(|w| w[0] < w[1]), "{knob}: {counts:?}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn attention_rows_sum_to_one(seed in any::<u64>(), n in 1usize..9, heads in prop::sample::select(vec![1usize, 2, 4])) {
        let mut r = rng(seed);
        let attn = Attention::new(8, heads, &mut r).unwrap();
        let q: Vec<f32> = (0..8).map(|_| r.random_range(-2.0f32..2.0)).collect();
        let (out, trace) = mha_fuse(&attn, &tokens(n, 8, &mut r), &q).unwrap();
        prop_assert_eq!(out.len(), 8);
        prop_assert_eq!(trace.weights.len(), heads);
        for w in &trace.weights {
            prop_assert_eq!(w.len(), n);
            prop_assert!(w.iter().all(|&x| x >= 0.0));
            prop_assert!((w.iter().sum::<f32>() - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn token_order_does_not_matter(seed in any::<u64>(), n in 2usize..7) {
        let mut r = rng(seed);
        let attn = Attention::new(8, 2, &mut r).unwrap();
        let q: Vec<f32> = (0..8).map(|_| r.random_range(-2.0f32..2.0)).collect();
        let t = tokens(n, 8, &mut r);
        let mut order: Vec<usize> = (0..n).collect();
        order.rotate_left(1 + seed as usize % (n - 1));
        let permuted = Tensor::from_fn(&[n, 8], |i| t.data()[order[i / 8] * 8 + i % 8]);
        let (a, _) = mha_fuse(&attn, &t, &q).unwrap();
        let (b, _) = mha_fuse(&attn, &permuted, &q).unwrap();
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() <= 1e-5 * x.abs().max(1.0), "{} vs {}", x, y);
        }
    }

    #[test]
    fn cross_entropy_gradient_is_softmax_minus_onehot(
        logits in prop::collection::vec(-10.0f32..10.0, 2..6),
        pick in any::<prop::sample::Index>(),
    ) {
        let class = pick.index(logits.len());
        let (loss, g) = cross_entropy(&logits, class).unwrap();
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, |a, b| a.max(f64::from(b)));
        let z: f64 = logits.iter().map(|&l| (f64::from(l) - m).exp()).sum();
        for (i, &l) in logits.iter().enumerate() {
            let p = (f64::from(l) - m).exp() / z;
            let want = p - if i == class { 1.0 } else { 0.0 };
            prop_assert!((f64::from(g[i]) - want).abs() <= 1e-6);
        }
        let want_loss = -((f64::from(logits[class]) - m).exp() / z).ln();
        prop_assert!((f64::from(loss) - want_loss).abs() <= 1e-5 * want_loss.max(1.0));
    }
}

#[test]
fn degenerate_attention_cases() {
    let mut r = rng(5);
    let attn = Attention::new(8, 2, &mut r).unwrap();
    let q: Vec<f32> = (0..8).map(|_| r.random_range(-1.0f32..1.0)).collect();
    let row: Vec<f32> = (0..8).map(|_| r.random_range(-1.0f32..1.0)).collect();
    let same = Tensor::from_fn(&[5, 8], |i| row[i % 8]);
    let (_, trace) = mha_fuse(&attn, &same, &q).unwrap();
    for w in &trace.weights {
        assert!(w.iter().all(|&x| (x - 0.2).abs() < 1e-6));
    }
    // one token: the output is that token's projected value whatever the query
    let one = Tensor::new(vec![1, 8], row).unwrap();
    let (a, _) = mha_fuse(&attn, &one, &q).unwrap();
    let (b, _) = mha_fuse(&attn, &one, &[0.0; 8]).unwrap();
    assert_eq!(a, b);
    assert!(Attention::new(8, 3, &mut r).is_err());
}

#[test]
fn single_clip_regression_overfits() {
    let exp = thin_expansion();
    let fusion = FusionConfig {
        d_model: 8,
        heads: 2,
        video_tokens: 2,
        meta_features: 3,
        mode: FusionMode::Mha,
    };
    let mut net = build_net(exp, fusion, HeadKind::Regression, 1, 4).unwrap();
    let [c, t, h, w] = net.input_shape();
    let mut r = rng(8);
    let input = Tensor::from_fn(&[c, t, h, w], |_| r.random_range(-1.0f32..1.0));
    let scaler = TargetScaler::fit(&[300.0, 450.0, 520.0]).unwrap();
    let sample = CnnSample {
        input,
        meta: Some(vec![0.2, 0.7, 0.4]),
        target: Target::Value(scaler.scale(400.0)),
    };
    let mut opt = Adam::new(AdamConfig::with_lr(1e-2), &net);
    let predict = |net: &pulmo_core::stcnn::StcnnNet| {
        let out = net
            .forward(&sample.input, sample.meta.as_deref())
            .unwrap()
            .output[0];
        scaler.unscale(out)
    };
    let mut steps = 0;
    while (predict(&net) - 400.0).abs() >= 1.0 && steps < 500 {
        train_step(&mut net, std::slice::from_ref(&sample), &mut opt).unwrap();
        steps += 1;
    }
    let err = (predict(&net) - 400.0).abs();
    assert!(err < 1.0, "still {err} L/min off after {steps} steps");
    let again = predict(&net);
    assert_eq!(again.to_bits(), predict(&net).to_bits());
}
