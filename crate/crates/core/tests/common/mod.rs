//! Independent f64 reference implementations used as test oracles.
//!
//! Nothing here calls into the library's kernels: convolutions, LIF
//! dynamics and the two networks are re-derived with plain loops so the
//! library can be checked against them.

#![allow(dead_code)]

use pulmo_core::optim::Parameterized;
use pulmo_core::snn::SpikingNet;
use pulmo_core::stcnn::{Conv3d, StcnnNet};
use pulmo_core::Tensor;

pub mod checks;

/// Central-difference step shared by the gradient checks.
pub const FD_STEP: f64 = 1e-3;
/// Relative tolerance of the gradient checks.
pub const FD_RTOL: f64 = 1e-3;
/// Absolute floor for gradients that are zero up to rounding.
pub const FD_ATOL: f64 = 1e-6;

/// Shape plus f64 data, row-major.
#[derive(Clone, Debug)]
pub struct Nd {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Nd {
    pub fn zeros(shape: &[usize]) -> Self {
        Nd {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn from_tensor(t: &Tensor) -> Self {
        Nd {
            shape: t.shape().to_vec(),
            data: t.data().iter().map(|&v| f64::from(v)).collect(),
        }
    }
}

/// Naive 3-d cross-correlation over `[C,T,H,W]` with `[F,C',kt,kh,kw]`
/// kernels; `C' == 1` with `depthwise` pairs filter `c` with channel `c`.
pub fn conv3d_ref(
    x: &Nd,
    w: &[f64],
    wshape: &[usize],
    stride: [usize; 3],
    pad: [usize; 3],
    depthwise: bool,
) -> Nd {
    let [c, t, h, wd] = [x.shape[0], x.shape[1], x.shape[2], x.shape[3]];
    let (f, cg, kt, kh, kw) = (wshape[0], wshape[1], wshape[2], wshape[3], wshape[4]);
    let ot = (t + 2 * pad[0] - kt) / stride[0] + 1;
    let oh = (h + 2 * pad[1] - kh) / stride[1] + 1;
    let ow = (wd + 2 * pad[2] - kw) / stride[2] + 1;
    let mut out = Nd::zeros(&[f, ot, oh, ow]);
    let at = |ch: usize, ti: isize, hi: isize, wi: isize| -> f64 {
        if ti < 0 || hi < 0 || wi < 0 || ti >= t as isize || hi >= h as isize || wi >= wd as isize {
            0.0
        } else {
            x.data[((ch * t + ti as usize) * h + hi as usize) * wd + wi as usize]
        }
    };
    for fi in 0..f {
        for a in 0..ot {
            for b in 0..oh {
                for d in 0..ow {
                    let mut s = 0.0;
                    for ci in 0..cg {
                        let ch = if depthwise { fi } else { ci };
                        for p in 0..kt {
                            for q in 0..kh {
                                for r in 0..kw {
                                    let ti = (a * stride[0] + p) as isize - pad[0] as isize;
                                    let hi = (b * stride[1] + q) as isize - pad[1] as isize;
                                    let wi = (d * stride[2] + r) as isize - pad[2] as isize;
                                    let wv = w[(((fi * cg + ci) * kt + p) * kh + q) * kw + r];
                                    s += wv * at(ch, ti, hi, wi);
                                }
                            }
                        }
                    }
                    out.data[((fi * ot + a) * oh + b) * ow + d] = s;
                }
            }
        }
    }
    let _ = c;
    out
}

/// `W x + b` with `W` stored `[out, in]`.
pub fn dense_ref(w: &[f64], b: &[f64], x: &[f64]) -> Vec<f64> {
    let n = x.len();
    b.iter()
        .enumerate()
        .map(|(o, bo)| bo + (0..n).map(|i| w[o * n + i] * x[i]).sum::<f64>())
        .collect()
}

pub fn relu(v: &mut [f64]) {
    v.iter_mut().for_each(|x| *x = x.max(0.0));
}

/// ReLU that also appends which units were active, so callers can tell
/// whether a perturbation crossed a kink.
fn relu_rec(v: &mut [f64], pattern: &mut Vec<bool>) {
    for x in v.iter_mut() {
        pattern.push(*x > 0.0);
        *x = x.max(0.0);
    }
}

/// Scalar LIF step: `m = beta v + i`, `s = [m >= V_th]`, `v' = m - s V_th`.
pub fn lif_scalar(v: f32, i: f32, beta: f32, v_th: f32) -> (f32, f32) {
    let m = beta * v + i;
    let s = if m >= v_th { 1.0 } else { 0.0 };
    (s, m - s * v_th)
}

/// Smooth stand-in for a spike, the antiderivative of `1/(1+k|u|)^2`.
pub fn smooth_spike(u: f64, k: f64) -> f64 {
    0.5 + u / (1.0 + k * u.abs())
}

/// Parameters in `Parameterized::params` order, widened to f64.
pub fn params_f64<M: Parameterized>(m: &M) -> Vec<Vec<f64>> {
    m.params()
        .into_iter()
        .map(|(_, t)| t.data().iter().map(|&v| f64::from(v)).collect())
        .collect()
}

/// Hands out parameter tensors in order.
struct Cursor<'a> {
    p: &'a [Vec<f64>],
    i: usize,
}

impl<'a> Cursor<'a> {
    fn next(&mut self) -> &'a [f64] {
        self.i += 1;
        &self.p[self.i - 1]
    }
}

/// Smooth-spike forward of a [`SpikingNet`] in f64. `video` is `[T,C,H,W]`
/// flattened, `meta` is `[T, features]` flattened when the net has a
/// metadata branch. Returns per-class spike sums and, per pooling window,
/// which input won.
pub fn snn_smooth_counts(
    net: &SpikingNet,
    p: &[Vec<f64>],
    video: &[f64],
    meta: Option<&[f64]>,
    t_steps: usize,
) -> ([f64; 2], Vec<bool>) {
    let mut pattern = Vec::new();
    let cfg = net.config();
    let mut cur = Cursor { p, i: 0 };
    let (conv_w, conv_b) = (cur.next(), cur.next());
    let (hid_w, hid_b) = (cur.next(), cur.next());
    let meta_layer = net.meta.as_ref().map(|_| (cur.next(), cur.next()));
    let (out_w, out_b) = (cur.next(), cur.next());

    let (c, side, k, f) = (
        cfg.in_channels,
        cfg.input_side,
        cfg.kernel,
        cfg.conv_filters,
    );
    let cs = side + 1 - k;
    let ps = (cs - cfg.pool) / cfg.pool + 1;
    let lif = |layer: &pulmo_core::snn::LifParams, v: &mut [f64], i: &[f64]| -> Vec<f64> {
        let (beta, vth, slope) = (
            f64::from(layer.beta),
            f64::from(layer.v_th),
            f64::from(layer.surrogate_slope),
        );
        v.iter_mut()
            .zip(i)
            .map(|(vi, &ii)| {
                let m = beta * *vi + ii;
                let s = smooth_spike(m - vth, slope);
                *vi = m - s * vth;
                s
            })
            .collect()
    };
    let mut v_conv = vec![0.0; f * cs * cs];
    let mut v_hid = vec![0.0; cfg.hidden];
    let mut v_meta = vec![0.0; cfg.meta_hidden];
    let mut v_out = vec![0.0; 2];
    let mut counts = [0.0; 2];
    let frame = c * side * side;
    for t in 0..t_steps {
        let x = &video[t * frame..(t + 1) * frame];
        let mut i_conv = vec![0.0; f * cs * cs];
        for fi in 0..f {
            for a in 0..cs {
                for b in 0..cs {
                    let mut s = conv_b[fi];
                    for ci in 0..c {
                        for p in 0..k {
                            for q in 0..k {
                                s += conv_w[((fi * c + ci) * k + p) * k + q]
                                    * x[(ci * side + a + p) * side + b + q];
                            }
                        }
                    }
                    i_conv[(fi * cs + a) * cs + b] = s;
                }
            }
        }
        let s_conv = lif(&net.conv.lif, &mut v_conv, &i_conv);
        let mut pooled = vec![0.0; f * ps * ps];
        for fi in 0..f {
            for a in 0..ps {
                for b in 0..ps {
                    let mut m = f64::NEG_INFINITY;
                    let mut arg = 0;
                    for p in 0..cfg.pool {
                        for q in 0..cfg.pool {
                            let v = s_conv[(fi * cs + a * cfg.pool + p) * cs + b * cfg.pool + q];
                            if v > m {
                                m = v;
                                arg = p * cfg.pool + q;
                            }
                        }
                    }
                    pattern.extend((0..cfg.pool * cfg.pool).map(|i| i == arg));
                    pooled[(fi * ps + a) * ps + b] = m;
                }
            }
        }
        let mut fused = lif(
            &net.hidden.lif,
            &mut v_hid,
            &dense_ref(hid_w, hid_b, &pooled),
        );
        if let (Some((mw, mb)), Some(m)) = (meta_layer, meta) {
            let nf = cfg.meta_features;
            let layer = net.meta.as_ref().expect("meta layer");
            fused.extend(lif(
                &layer.lif,
                &mut v_meta,
                &dense_ref(mw, mb, &m[t * nf..(t + 1) * nf]),
            ));
        }
        let s_out = lif(&net.out.lif, &mut v_out, &dense_ref(out_w, out_b, &fused));
        counts[0] += s_out[0];
        counts[1] += s_out[1];
    }
    (counts, pattern)
}

fn conv_layer(cur: &mut Cursor, layer: &Conv3d, x: &Nd) -> Nd {
    let (w, b) = (cur.next(), cur.next());
    let mut y = conv3d_ref(
        x,
        w,
        layer.weight.shape(),
        layer.stride,
        layer.pad,
        layer.depthwise,
    );
    let plane = y.data.len() / y.shape[0];
    for (c, chunk) in y.data.chunks_mut(plane).enumerate() {
        chunk.iter_mut().for_each(|v| *v += b[c]);
    }
    y
}

/// Forward of an X3D-lite [`StcnnNet`] in f64; returns the raw head output
/// and the activity pattern of every ReLU.
pub fn stcnn_forward_ref(
    net: &StcnnNet,
    p: &[Vec<f64>],
    input: &Nd,
    meta: Option<&[f64]>,
) -> (Vec<f64>, Vec<bool>) {
    let mut pat = Vec::new();
    let relu = |v: &mut [f64], pat: &mut Vec<bool>| relu_rec(v, pat);
    let mut cur = Cursor { p, i: 0 };
    let mut x = conv_layer(&mut cur, &net.stem, input);
    relu(&mut x.data, &mut pat);
    for blk in &net.blocks {
        let mut a = conv_layer(&mut cur, &blk.expand, &x);
        relu(&mut a.data, &mut pat);
        let mut a = conv_layer(&mut cur, &blk.spatial, &a);
        relu(&mut a.data, &mut pat);
        let mut a = conv_layer(&mut cur, &blk.temporal, &a);
        relu(&mut a.data, &mut pat);
        let mut out = conv_layer(&mut cur, &blk.project, &a);
        let skip = match &blk.shortcut {
            Some(sc) => conv_layer(&mut cur, sc, &x),
            None => x.clone(),
        };
        out.data
            .iter_mut()
            .zip(&skip.data)
            .for_each(|(o, s)| *o += s);
        relu(&mut out.data, &mut pat);
        x = out;
    }
    let (c, t, hw) = (x.shape[0], x.shape[1], x.shape[2] * x.shape[3]);
    let fusion = net.fusion();
    let n = fusion.video_tokens;
    let (tw, tb) = (cur.next(), cur.next());
    let tokens: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let (a, b) = (i * t / n, (i + 1) * t / n);
            let mean: Vec<f64> = (0..c)
                .map(|ch| {
                    x.data[(ch * t + a) * hw..(ch * t + b) * hw]
                        .iter()
                        .sum::<f64>()
                        / ((b - a) * hw) as f64
                })
                .collect();
            dense_ref(tw, tb, &mean)
        })
        .collect();
    let tokens: Vec<Vec<f64>> = tokens
        .into_iter()
        .map(|mut tok| {
            relu(&mut tok, &mut pat);
            tok
        })
        .collect();
    let d = fusion.d_model;
    let emb = net.meta.as_ref().map(|_| {
        let (w, b) = (cur.next(), cur.next());
        let mut e = dense_ref(w, b, meta.expect("metadata features"));
        relu(&mut e, &mut pat);
        e
    });
    let mean: Vec<f64> = (0..d)
        .map(|j| tokens.iter().map(|tk| tk[j]).sum::<f64>() / n as f64)
        .collect();
    let mut fused = match &net.attention {
        Some(att) => {
            let (qw, qb, kw, kb, vw, vb, ow, ob) = (
                cur.next(),
                cur.next(),
                cur.next(),
                cur.next(),
                cur.next(),
                cur.next(),
                cur.next(),
                cur.next(),
            );
            let q = dense_ref(qw, qb, emb.as_ref().expect("query"));
            let keys: Vec<Vec<f64>> = tokens.iter().map(|tk| dense_ref(kw, kb, tk)).collect();
            let vals: Vec<Vec<f64>> = tokens.iter().map(|tk| dense_ref(vw, vb, tk)).collect();
            let dh = d / att.heads;
            let mut concat = vec![0.0; d];
            for h in 0..att.heads {
                let r = h * dh..(h + 1) * dh;
                let scores: Vec<f64> = keys
                    .iter()
                    .map(|k| {
                        q[r.clone()]
                            .iter()
                            .zip(&k[r.clone()])
                            .map(|(a, b)| a * b)
                            .sum::<f64>()
                            / (dh as f64).sqrt()
                    })
                    .collect();
                let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
                let z: f64 = e.iter().sum();
                for (i, v) in vals.iter().enumerate() {
                    for j in r.clone() {
                        concat[j] += e[i] / z * v[j];
                    }
                }
            }
            let out = dense_ref(ow, ob, &concat);
            out.iter().zip(&mean).map(|(o, m)| o + m).collect()
        }
        None => mean,
    };
    if let Some(e) = &emb {
        fused.extend_from_slice(e);
    }
    let (hw_, hb) = (cur.next(), cur.next());
    assert_eq!(cur.i, p.len(), "reference consumed every parameter");
    (dense_ref(hw_, hb, &fused), pat)
}

/// One mismatching gradient entry.
#[derive(Debug)]
pub struct GradMismatch {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Outcome of [`fd_check`].
#[derive(Debug, Default)]
pub struct FdReport {
    pub mismatches: Vec<GradMismatch>,
    pub checked: usize,
    /// Entries whose `FD_STEP` neighbourhood crossed a non-differentiable
    /// point and were re-checked with a smaller step.
    pub shrunk: usize,
}

/// Compare analytic gradients against central differences in f64 over
/// every entry of every parameter. `loss` returns the loss and a pattern
/// that changes whenever a kink (ReLU, max) is crossed; where the pattern
/// at `x +- FD_STEP` differs from the one at `x`, the step is divided by
/// ten until it no longer does.
pub fn fd_check<M: Parameterized>(
    model: &M,
    analytic: &[Tensor],
    loss: impl Fn(&[Vec<f64>]) -> (f64, Vec<bool>),
) -> FdReport {
    let names: Vec<String> = model.params().into_iter().map(|(n, _)| n).collect();
    let mut p = params_f64(model);
    let (_, base) = loss(&p);
    let mut report = FdReport::default();
    for (pi, name) in names.iter().enumerate() {
        for j in 0..p[pi].len() {
            let x0 = p[pi][j];
            let mut h = FD_STEP;
            let numeric = loop {
                p[pi][j] = x0 + h;
                let (up, pu) = loss(&p);
                p[pi][j] = x0 - h;
                let (down, pd) = loss(&p);
                p[pi][j] = x0;
                if (pu == base && pd == base) || h < 1e-8 {
                    break (up - down) / (2.0 * h);
                }
                h /= 10.0;
            };
            if h < FD_STEP {
                report.shrunk += 1;
            }
            let a = f64::from(analytic[pi].data()[j]);
            report.checked += 1;
            if (a - numeric).abs() > FD_RTOL * a.abs().max(numeric.abs()) + FD_ATOL {
                report.mismatches.push(GradMismatch {
                    param: name.clone(),
                    index: j,
                    analytic: a,
                    numeric,
                });
            }
        }
    }
    report
}

pub mod grad {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use pulmo_core::optim::Parameterized;
    use pulmo_core::snn::{SnnConfig, SpikeFn, SpikeTrain, SpikingNet};
    use pulmo_core::stcnn::{build_net, ExpansionConfig, FusionConfig, FusionMode, HeadKind};
    use pulmo_core::Tensor;

    use super::{fd_check, snn_smooth_counts, stcnn_forward_ref, FdReport, Nd};

    /// Biases start at zero, which puts every dead ReLU exactly on its kink.
    /// Move them to a generic point before checking.
    fn jitter_biases<M: Parameterized>(net: &mut M, rng: &mut ChaCha8Rng) {
        let names: Vec<String> = net.params().into_iter().map(|(n, _)| n).collect();
        for (name, t) in names.iter().zip(net.params_mut()) {
            if name.ends_with("bias") {
                t.data_mut()
                    .iter_mut()
                    .for_each(|b| *b = rng.random_range(-0.1..0.1));
            }
        }
    }

    /// Small spiking net with a metadata branch: conv, pooled hidden layer,
    /// metadata layer and output layer.
    pub fn snn_check(seed: u64) -> FdReport {
        let cfg = SnnConfig {
            in_channels: 1,
            input_side: 6,
            conv_filters: 2,
            kernel: 3,
            pool: 2,
            hidden: 4,
            meta_features: 3,
            meta_hidden: 2,
            ..SnnConfig::default()
        };
        let t = 8;
        let mut net = SpikingNet::new(cfg, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        jitter_biases(&mut net, &mut rng);
        let video = Tensor::from_fn(
            &[t, 1, 6, 6],
            |_| if rng.random_bool(0.5) { 1.0 } else { 0.0 },
        );
        let meta = Tensor::from_fn(&[t, 3], |_| if rng.random_bool(0.5) { 1.0 } else { 0.0 });
        let weights = [0.7f32, -1.3];
        let (_, trace) = net
            .forward_with(
                &SpikeTrain::new(video.clone()).unwrap(),
                Some(&SpikeTrain::new(meta.clone()).unwrap()),
                SpikeFn::Smooth,
            )
            .unwrap();
        let g = net.backward(&trace, &weights).unwrap();
        let v64 = Nd::from_tensor(&video).data;
        let m64 = Nd::from_tensor(&meta).data;
        fd_check(&net, &g.0, |p| {
            let (c, pattern) = snn_smooth_counts(&net, p, &v64, Some(&m64), t);
            (0.7 * c[0] - 1.3 * c[1], pattern)
        })
    }

    pub fn thin_expansion() -> ExpansionConfig {
        ExpansionConfig {
            gamma_t: 0.2,
            gamma_tau: 1.0,
            gamma_s: 16.0 / 224.0,
            gamma_w: 0.25,
            gamma_b: 1.0,
            gamma_d: 0.5,
        }
    }

    /// Thin X3D-lite (d_model 8, one block per stage) for one fusion mode.
    pub fn stcnn_check(mode: FusionMode, head: HeadKind, seed: u64) -> FdReport {
        let fusion = FusionConfig {
            mode,
            d_model: 8,
            heads: 2,
            video_tokens: 2,
            meta_features: 3,
        };
        let mut net = build_net(thin_expansion(), fusion, head, 1, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xc0de);
        jitter_biases(&mut net, &mut rng);
        let x = Tensor::from_fn(&net.input_shape(), |_| rng.random_range(-1.0..1.0));
        let meta: Vec<f32> = (0..3).map(|_| rng.random_range(0.0..1.0)).collect();
        let meta_arg = net.uses_metadata().then_some(meta.as_slice());
        let r: Vec<f32> = (0..head.outputs()).map(|i| [0.9f32, -0.6][i]).collect();
        let trace = net.forward(&x, meta_arg).unwrap();
        let g = net.backward(&trace, &r).unwrap();
        let x64 = Nd::from_tensor(&x);
        let m64: Vec<f64> = meta.iter().map(|&v| f64::from(v)).collect();
        assert_eq!(g.0.len(), net.params().len());
        fd_check(&net, &g.0, |p| {
            let (out, pattern) =
                stcnn_forward_ref(&net, p, &x64, net.uses_metadata().then_some(m64.as_slice()));
            (
                out.iter().zip(&r).map(|(o, &w)| o * f64::from(w)).sum(),
                pattern,
            )
        })
    }
}
