//! Convolutional spiking classifier with an optional metadata branch.
//!
//! Every layer is feed-forward in space and recurrent only through its own
//! membrane, so the forward pass runs one layer at a time over all
//! timesteps and BPTT runs the layers in reverse, each one backwards in time.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{PulmoError, Result};
use crate::numerics::{
    conv3d, conv3d_backward,
    init::{kaiming_uniform, GAIN_LINEAR},
    linear_backward, linear_slice, maxpool2d_backward, maxpool2d_with_indices, Tensor,
};
use crate::optim::{Grads, Parameterized};

use super::lif::{lif_backward, lif_run, LifParams, SpikeFn, SpikeTrain};

pub const N_CLASSES: usize = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SnnConfig {
    pub in_channels: usize,
    /// Side of the square input frame.
    pub input_side: usize,
    pub conv_filters: usize,
    pub kernel: usize,
    pub pool: usize,
    pub hidden: usize,
    /// Metadata features per timestep; 0 disables the metadata branch.
    pub meta_features: usize,
    pub meta_hidden: usize,
    pub lif: LifParams,
}

impl Default for SnnConfig {
    fn default() -> Self {
        SnnConfig {
            in_channels: 1,
            input_side: 28,
            conv_filters: 8,
            kernel: 5,
            pool: 2,
            hidden: 64,
            meta_features: 0,
            meta_hidden: 16,
            lif: LifParams::default(),
        }
    }
}

impl SnnConfig {
    pub fn conv_side(&self) -> usize {
        self.input_side + 1 - self.kernel
    }

    pub fn pooled_side(&self) -> usize {
        (self.conv_side() - self.pool) / self.pool + 1
    }

    pub fn pooled_len(&self) -> usize {
        self.conv_filters * self.pooled_side() * self.pooled_side()
    }

    pub fn validate(&self) -> Result<()> {
        self.lif.validate()?;
        let positive = [
            ("in_channels", self.in_channels),
            ("input_side", self.input_side),
            ("conv_filters", self.conv_filters),
            ("kernel", self.kernel),
            ("pool", self.pool),
            ("hidden", self.hidden),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(PulmoError::Config(format!("snn {name} must be >= 1")));
        }
        if self.kernel > self.input_side {
            return Err(PulmoError::Config(format!(
                "snn kernel {} exceeds input side {}",
                self.kernel, self.input_side
            )));
        }
        if self.pool > self.conv_side() {
            return Err(PulmoError::Config(format!(
                "snn pool {} exceeds conv output side {}",
                self.pool,
                self.conv_side()
            )));
        }
        if self.meta_features > 0 && self.meta_hidden == 0 {
            return Err(PulmoError::Config("snn meta_hidden must be >= 1".into()));
        }
        Ok(())
    }
}

/// Weights and neuron constants of one fully connected spiking layer.
#[derive(Clone, Debug, PartialEq)]
pub struct SpikingDense {
    pub weight: Tensor,
    pub bias: Tensor,
    pub lif: LifParams,
}

impl SpikingDense {
    fn new(inputs: usize, outputs: usize, lif: LifParams, rng: &mut ChaCha8Rng) -> Self {
        SpikingDense {
            weight: kaiming_uniform(&[outputs, inputs], inputs, GAIN_LINEAR, rng),
            bias: Tensor::zeros(&[outputs]),
            lif,
        }
    }

    fn outputs(&self) -> usize {
        self.weight.dim(0)
    }

    fn currents(&self, inputs: &[f32], n_in: usize) -> Result<Vec<f32>> {
        let mut out = Vec::with_capacity(inputs.len() / n_in * self.outputs());
        for x in inputs.chunks(n_in) {
            out.extend(linear_slice(x, &self.weight, &self.bias)?);
        }
        Ok(out)
    }
}

/// Spiking 2-d convolution (`[F,C,k,k]` kernels, stride 1, no padding).
#[derive(Clone, Debug, PartialEq)]
pub struct SpikingConv {
    pub weight: Tensor,
    pub bias: Tensor,
    pub lif: LifParams,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpikingNet {
    cfg: SnnConfig,
    pub conv: SpikingConv,
    pub hidden: SpikingDense,
    pub meta: Option<SpikingDense>,
    pub out: SpikingDense,
}

/// Everything BPTT needs from a forward pass.
#[derive(Clone, Debug)]
pub struct SnnTrace {
    pub timesteps: usize,
    pub spike_fn: SpikeFn,
    /// Input spikes rearranged to `[C,T,H,W]`.
    input_ct: Tensor,
    conv_u: Vec<f32>,
    pool_idx: Vec<Vec<usize>>,
    pooled: Vec<f32>,
    hidden_u: Vec<f32>,
    meta_in: Vec<f32>,
    meta_u: Vec<f32>,
    fused: Vec<f32>,
    out_u: Vec<f32>,
    /// Output spikes per timestep, `[T, 2]`.
    pub out_spikes: Vec<f32>,
    /// Spikes of the convolutional layer, `[T, F*H'*W']`.
    pub conv_spikes: Vec<f32>,
    pub hidden_spikes: Vec<f32>,
}

/// `[A,B,inner] -> [B,A,inner]`.
pub(crate) fn swap_leading(data: &[f32], a: usize, b: usize, inner: usize) -> Vec<f32> {
    let mut out = vec![0.0; data.len()];
    for i in 0..a {
        for j in 0..b {
            let src = (i * b + j) * inner;
            let dst = (j * a + i) * inner;
            out[dst..dst + inner].copy_from_slice(&data[src..src + inner]);
        }
    }
    out
}

impl SpikingNet {
    pub fn new(cfg: SnnConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (f, c, k) = (cfg.conv_filters, cfg.in_channels, cfg.kernel);
        let conv = SpikingConv {
            weight: kaiming_uniform(&[f, c, k, k], c * k * k, GAIN_LINEAR, &mut rng),
            bias: Tensor::zeros(&[f]),
            lif: cfg.lif,
        };
        let hidden = SpikingDense::new(cfg.pooled_len(), cfg.hidden, cfg.lif, &mut rng);
        let meta = (cfg.meta_features > 0)
            .then(|| SpikingDense::new(cfg.meta_features, cfg.meta_hidden, cfg.lif, &mut rng));
        let fused = cfg.hidden + if meta.is_some() { cfg.meta_hidden } else { 0 };
        let out = SpikingDense::new(fused, N_CLASSES, cfg.lif, &mut rng);
        Ok(SpikingNet {
            cfg,
            conv,
            hidden,
            meta,
            out,
        })
    }

    pub fn config(&self) -> &SnnConfig {
        &self.cfg
    }

    pub fn is_multimodal(&self) -> bool {
        self.meta.is_some()
    }

    /// Name, weights, bias and neuron constants of each layer.
    pub fn layers(&self) -> Vec<(&'static str, &Tensor, &Tensor, &LifParams)> {
        let mut v = vec![
            ("conv", &self.conv.weight, &self.conv.bias, &self.conv.lif),
            (
                "hidden",
                &self.hidden.weight,
                &self.hidden.bias,
                &self.hidden.lif,
            ),
        ];
        if let Some(m) = &self.meta {
            v.push(("meta", &m.weight, &m.bias, &m.lif));
        }
        v.push(("out", &self.out.weight, &self.out.bias, &self.out.lif));
        v
    }

    /// Run all timesteps and count output spikes per class.
    pub fn forward(
        &self,
        video: &SpikeTrain,
        meta: Option<&SpikeTrain>,
    ) -> Result<(Tensor, SnnTrace)> {
        self.forward_with(video, meta, SpikeFn::Heaviside)
    }

    pub fn forward_with(
        &self,
        video: &SpikeTrain,
        meta: Option<&SpikeTrain>,
        spike_fn: SpikeFn,
    ) -> Result<(Tensor, SnnTrace)> {
        let cfg = &self.cfg;
        let t_steps = video.timesteps();
        let (c, side) = (cfg.in_channels, cfg.input_side);
        if video.frame_shape() != [c, side, side] {
            return Err(PulmoError::dim(
                "video spike frame [C,H,W]",
                format!("{:?}", [c, side, side]),
                format!("{:?}", video.frame_shape()),
            ));
        }
        let meta_in: Vec<f32> = match (&self.meta, meta) {
            (Some(_), Some(m)) => {
                if m.timesteps() != t_steps {
                    return Err(PulmoError::Protocol(format!(
                        "metadata spike train has {} timesteps, video has {t_steps}",
                        m.timesteps()
                    )));
                }
                if m.frame_shape() != [cfg.meta_features] {
                    return Err(PulmoError::dim(
                        "metadata features",
                        cfg.meta_features,
                        format!("{:?}", m.frame_shape()),
                    ));
                }
                m.tensor().data().to_vec()
            }
            (Some(_), None) => {
                return Err(PulmoError::Protocol(
                    "multimodal spiking net needs a metadata spike train".into(),
                ))
            }
            (None, Some(_)) => {
                return Err(PulmoError::Protocol(
                    "video-only spiking net was given metadata spikes".into(),
                ))
            }
            (None, None) => Vec::new(),
        };

        // conv currents for all timesteps at once: [F,T,H',W']
        let frame = side * side;
        let input_ct = Tensor::new(
            vec![c, t_steps, side, side],
            swap_leading(video.tensor().data(), t_steps, c, frame),
        )?;
        let (f, k) = (cfg.conv_filters, cfg.kernel);
        let w5 = self.conv.weight.clone().reshape(&[f, c, 1, k, k])?;
        let mut cur = conv3d(&input_ct, &w5, [1, 1, 1], [0, 0, 0])?;
        let cs = cfg.conv_side();
        let plane = t_steps * cs * cs;
        for (fi, chunk) in cur.data_mut().chunks_mut(plane).enumerate() {
            let b = self.conv.bias.data()[fi];
            chunk.iter_mut().for_each(|x| *x += b);
        }
        let n_conv = f * cs * cs;
        let cur_t = swap_leading(cur.data(), f, t_steps, cs * cs);
        let (conv_spikes, conv_u) = lif_run(&cur_t, n_conv, &self.conv.lif, spike_fn);

        let n_pool = cfg.pooled_len();
        let mut pooled = Vec::with_capacity(t_steps * n_pool);
        let mut pool_idx = Vec::with_capacity(t_steps);
        for s in conv_spikes.chunks(n_conv) {
            let st = Tensor::new(vec![f, cs, cs], s.to_vec())?;
            let (p, idx) = maxpool2d_with_indices(&st, cfg.pool, cfg.pool)?;
            pooled.extend_from_slice(p.data());
            pool_idx.push(idx);
        }

        let hid_cur = self.hidden.currents(&pooled, n_pool)?;
        let (hidden_spikes, hidden_u) = lif_run(&hid_cur, cfg.hidden, &self.hidden.lif, spike_fn);

        let (meta_spikes, meta_u) = match &self.meta {
            Some(m) => {
                let mc = m.currents(&meta_in, cfg.meta_features)?;
                lif_run(&mc, cfg.meta_hidden, &m.lif, spike_fn)
            }
            None => (Vec::new(), Vec::new()),
        };
        let n_meta = self.meta.as_ref().map_or(0, |m| m.outputs());
        let n_fused = cfg.hidden + n_meta;
        let mut fused = Vec::with_capacity(t_steps * n_fused);
        for t in 0..t_steps {
            fused.extend_from_slice(&hidden_spikes[t * cfg.hidden..(t + 1) * cfg.hidden]);
            if n_meta > 0 {
                fused.extend_from_slice(&meta_spikes[t * n_meta..(t + 1) * n_meta]);
            }
        }
        let out_cur = self.out.currents(&fused, n_fused)?;
        let (out_spikes, out_u) = lif_run(&out_cur, N_CLASSES, &self.out.lif, spike_fn);

        let mut counts = [0.0f32; N_CLASSES];
        for s in out_spikes.chunks(N_CLASSES) {
            counts[0] += s[0];
            counts[1] += s[1];
        }
        let counts = Tensor::vector(counts.to_vec());
        counts.check_finite("spiking output counts")?;
        Ok((
            counts,
            SnnTrace {
                timesteps: t_steps,
                spike_fn,
                input_ct,
                conv_u,
                pool_idx,
                pooled,
                hidden_u,
                meta_in,
                meta_u,
                fused,
                out_u,
                out_spikes,
                conv_spikes,
                hidden_spikes,
            },
        ))
    }

    /// BPTT through a recorded forward pass, given `dL/d counts`.
    pub fn backward(&self, trace: &SnnTrace, grad_counts: &[f32]) -> Result<Grads> {
        if grad_counts.len() != N_CLASSES {
            return Err(PulmoError::dim(
                "count gradient",
                N_CLASSES,
                grad_counts.len(),
            ));
        }
        let cfg = &self.cfg;
        let t_steps = trace.timesteps;
        let mut grads = self.zero_grads();
        let (mut g_conv_w, mut g_conv_b) = (grads.0[0].clone(), grads.0[1].clone());
        let (mut g_hid_w, mut g_hid_b) = (grads.0[2].clone(), grads.0[3].clone());

        // output layer
        let ds_out: Vec<f32> = (0..t_steps)
            .flat_map(|_| grad_counts.iter().copied())
            .collect();
        let dm_out = lif_backward(&ds_out, &trace.out_u, N_CLASSES, &self.out.lif);
        let n_meta = self.meta.as_ref().map_or(0, |m| m.outputs());
        let n_fused = cfg.hidden + n_meta;
        let (mut g_out_w, mut g_out_b) = (
            Tensor::zeros(self.out.weight.shape()),
            Tensor::zeros(self.out.bias.shape()),
        );
        let mut ds_hidden = vec![0.0f32; t_steps * cfg.hidden];
        let mut ds_meta = vec![0.0f32; t_steps * n_meta];
        for t in 0..t_steps {
            let z = &trace.fused[t * n_fused..(t + 1) * n_fused];
            let dm = &dm_out[t * N_CLASSES..(t + 1) * N_CLASSES];
            let dz = linear_backward(z, &self.out.weight, dm, &mut g_out_w, &mut g_out_b, true)
                .expect("input gradient requested");
            ds_hidden[t * cfg.hidden..(t + 1) * cfg.hidden].copy_from_slice(&dz[..cfg.hidden]);
            if n_meta > 0 {
                ds_meta[t * n_meta..(t + 1) * n_meta].copy_from_slice(&dz[cfg.hidden..]);
            }
        }

        // metadata branch
        let meta_grads = match &self.meta {
            Some(m) => {
                let dm = lif_backward(&ds_meta, &trace.meta_u, n_meta, &m.lif);
                let mut gw = Tensor::zeros(m.weight.shape());
                let mut gb = Tensor::zeros(m.bias.shape());
                for t in 0..t_steps {
                    let x = &trace.meta_in[t * cfg.meta_features..(t + 1) * cfg.meta_features];
                    linear_backward(
                        x,
                        &m.weight,
                        &dm[t * n_meta..(t + 1) * n_meta],
                        &mut gw,
                        &mut gb,
                        false,
                    );
                }
                Some((gw, gb))
            }
            None => None,
        };

        // hidden layer
        let n_pool = cfg.pooled_len();
        let dm_hid = lif_backward(&ds_hidden, &trace.hidden_u, cfg.hidden, &self.hidden.lif);
        let cs = cfg.conv_side();
        let n_conv = cfg.conv_filters * cs * cs;
        let mut ds_conv = Vec::with_capacity(t_steps * n_conv);
        for t in 0..t_steps {
            let p = &trace.pooled[t * n_pool..(t + 1) * n_pool];
            let dm = &dm_hid[t * cfg.hidden..(t + 1) * cfg.hidden];
            let dp = linear_backward(p, &self.hidden.weight, dm, &mut g_hid_w, &mut g_hid_b, true)
                .expect("input gradient requested");
            let d = maxpool2d_backward(&dp, &trace.pool_idx[t], &[cfg.conv_filters, cs, cs]);
            ds_conv.extend_from_slice(d.data());
        }

        // conv layer
        let dm_conv = lif_backward(&ds_conv, &trace.conv_u, n_conv, &self.conv.lif);
        let (f, c, k) = (cfg.conv_filters, cfg.in_channels, cfg.kernel);
        let dm_ft = Tensor::new(
            vec![f, t_steps, cs, cs],
            swap_leading(&dm_conv, t_steps, f, cs * cs),
        )?;
        let w5 = self.conv.weight.clone().reshape(&[f, c, 1, k, k])?;
        let (_, gk) = conv3d_backward(&trace.input_ct, &w5, &dm_ft, [1, 1, 1], [0, 0, 0], false)?;
        g_conv_w.data_mut().copy_from_slice(gk.data());
        let plane = t_steps * cs * cs;
        for (fi, chunk) in dm_ft.data().chunks(plane).enumerate() {
            g_conv_b.data_mut()[fi] = chunk.iter().sum();
        }

        grads.0[0] = g_conv_w;
        grads.0[1] = g_conv_b;
        grads.0[2] = g_hid_w;
        grads.0[3] = g_hid_b;
        let mut next = 4;
        if let Some((gw, gb)) = meta_grads {
            grads.0[next] = gw;
            grads.0[next + 1] = gb;
            next += 2;
        }
        grads.0[next] = g_out_w;
        grads.0[next + 1] = g_out_b;
        Ok(grads)
    }
}

impl Parameterized for SpikingNet {
    fn params(&self) -> Vec<(String, &Tensor)> {
        self.layers()
            .into_iter()
            .flat_map(|(name, w, b, _)| {
                [(format!("{name}.weight"), w), (format!("{name}.bias"), b)]
            })
            .collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = vec![
            &mut self.conv.weight,
            &mut self.conv.bias,
            &mut self.hidden.weight,
            &mut self.hidden.bias,
        ];
        if let Some(m) = &mut self.meta {
            v.push(&mut m.weight);
            v.push(&mut m.bias);
        }
        v.push(&mut self.out.weight);
        v.push(&mut self.out.bias);
        v
    }
}
