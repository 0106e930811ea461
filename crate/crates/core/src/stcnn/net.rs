//! The X3D-lite network: stem, three residual stages, temporal token
//! pooling, optional metadata fusion and a linear head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{PulmoError, Result};
use crate::numerics::init::{GAIN_LINEAR, GAIN_RELU};
use crate::numerics::{relu_backward_inplace, relu_inplace, Tensor};
use crate::optim::{Grads, Parameterized};

use super::attention::{embed_metadata, mha_fuse, Attention, AttentionTrace};
use super::layers::{check, Block, BlockTrace, Conv3d, Dense};
use super::{ExpansionConfig, FusionConfig, FusionMode, HeadKind};

#[derive(Clone, Debug, PartialEq)]
pub struct StcnnNet {
    expansion: ExpansionConfig,
    fusion: FusionConfig,
    head_kind: HeadKind,
    in_channels: usize,
    pub stem: Conv3d,
    pub blocks: Vec<Block>,
    pub token: Dense,
    pub meta: Option<Dense>,
    pub attention: Option<Attention>,
    pub head: Dense,
}

/// Everything the backward pass needs from a forward pass.
#[derive(Clone, Debug)]
pub struct StcnnTrace {
    input: Tensor,
    stem: Tensor,
    blocks: Vec<BlockTrace>,
    chunks: Vec<(usize, usize)>,
    chunk_means: Vec<Vec<f32>>,
    tokens: Tensor,
    meta_in: Vec<f32>,
    meta_emb: Vec<f32>,
    attention: Option<AttentionTrace>,
    fused: Vec<f32>,
    /// Raw head outputs (a scaled regression value or two logits).
    pub output: Vec<f32>,
}

impl StcnnTrace {
    /// Video tokens `[video_tokens, d_model]`.
    pub fn tokens(&self) -> &Tensor {
        &self.tokens
    }

    pub fn attention_weights(&self) -> Option<&[Vec<f32>]> {
        self.attention.as_ref().map(|a| a.weights.as_slice())
    }
}

/// Build a randomly initialised network for `in_channels`-channel clips.
pub fn build_net(
    expansion: ExpansionConfig,
    fusion: FusionConfig,
    head: HeadKind,
    in_channels: usize,
    seed: u64,
) -> Result<StcnnNet> {
    expansion.validate()?;
    fusion.validate()?;
    if in_channels == 0 {
        return Err(PulmoError::Config("in_channels must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let widths = expansion.stage_widths();
    let stem = Conv3d::new(
        in_channels,
        widths[0],
        [3, 3, 3],
        [1, 2, 2],
        [1, 1, 1],
        false,
        GAIN_RELU,
        &mut rng,
    );
    let mut blocks = Vec::new();
    let mut c = widths[0];
    for &w in &widths {
        for b in 0..expansion.blocks_per_stage() {
            let stride = if b == 0 { 2 } else { 1 };
            blocks.push(Block::new(
                c,
                w,
                expansion.bottleneck(w),
                stride,
                (GAIN_RELU, GAIN_LINEAR),
                &mut rng,
            ));
            c = w;
        }
    }
    let d = fusion.d_model;
    let token = Dense::new(c, d, GAIN_RELU, &mut rng);
    let (meta, attention) = match fusion.mode {
        FusionMode::None => (None, None),
        FusionMode::Dense => (
            Some(Dense::new(fusion.meta_features, d, GAIN_RELU, &mut rng)),
            None,
        ),
        FusionMode::Mha => (
            Some(Dense::new(fusion.meta_features, d, GAIN_RELU, &mut rng)),
            Some(Attention::new(d, fusion.heads, &mut rng)?),
        ),
    };
    let fused = if meta.is_some() { 2 * d } else { d };
    let head_layer = Dense::new(fused, head.outputs(), GAIN_LINEAR, &mut rng);
    let net = StcnnNet {
        expansion,
        fusion,
        head_kind: head,
        in_channels,
        stem,
        blocks,
        token,
        meta,
        attention,
        head: head_layer,
    };
    // the temporal extent after the stem must hold one frame per token
    if expansion.frames_in() < fusion.video_tokens {
        return Err(PulmoError::Config(format!(
            "{} input frames cannot form {} video tokens",
            expansion.frames_in(),
            fusion.video_tokens
        )));
    }
    Ok(net)
}

/// Contiguous `[start, end)` ranges splitting `t` frames into `n` chunks.
fn chunk_ranges(t: usize, n: usize) -> Vec<(usize, usize)> {
    (0..n).map(|i| (i * t / n, (i + 1) * t / n)).collect()
}

impl StcnnNet {
    pub fn expansion(&self) -> &ExpansionConfig {
        &self.expansion
    }

    pub fn fusion(&self) -> &FusionConfig {
        &self.fusion
    }

    pub fn head_kind(&self) -> HeadKind {
        self.head_kind
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn uses_metadata(&self) -> bool {
        self.meta.is_some()
    }

    /// Expected input shape `[C, T, H, W]`.
    pub fn input_shape(&self) -> [usize; 4] {
        let s = self.expansion.input_side();
        [self.in_channels, self.expansion.frames_in(), s, s]
    }

    /// Forward pass on a standardised `[C, T, H, W]` input. `meta` holds
    /// normalised metadata features and is required exactly when the net
    /// fuses metadata.
    pub fn forward(&self, input: &Tensor, meta: Option<&[f32]>) -> Result<StcnnTrace> {
        input.expect_shape("stcnn input [C,T,H,W]", &self.input_shape())?;
        check(input, "input")?;
        let meta_in = match (&self.meta, meta) {
            (Some(m), Some(x)) => {
                if x.len() != m.inputs() {
                    return Err(PulmoError::dim("metadata features", m.inputs(), x.len()));
                }
                x.to_vec()
            }
            (Some(_), None) => {
                return Err(PulmoError::Protocol(format!(
                    "{} fusion needs metadata features",
                    self.fusion.mode
                )))
            }
            (None, Some(_)) => {
                return Err(PulmoError::Protocol(
                    "video-only network was given metadata".into(),
                ))
            }
            (None, None) => Vec::new(),
        };

        let mut stem = self.stem.forward(input)?;
        relu_inplace(stem.data_mut());
        check(&stem, "stem")?;
        let mut blocks: Vec<BlockTrace> = Vec::with_capacity(self.blocks.len());
        for (i, b) in self.blocks.iter().enumerate() {
            let x = blocks.last().map_or(&stem, |t| &t.out);
            let tr = b.forward(x, &format!("blocks.{i}"))?;
            blocks.push(tr);
        }
        let feat = blocks.last().map_or(&stem, |t| &t.out);
        let (c, t) = (feat.dim(0), feat.dim(1));
        let hw = feat.dim(2) * feat.dim(3);
        let n = self.fusion.video_tokens;
        if t < n {
            return Err(PulmoError::Config(format!(
                "{t} feature frames cannot form {n} tokens"
            )));
        }
        let chunks = chunk_ranges(t, n);
        let d = self.fusion.d_model;
        let mut chunk_means = Vec::with_capacity(n);
        let mut tokens = Vec::with_capacity(n * d);
        for &(a, b) in &chunks {
            let norm = 1.0 / ((b - a) * hw) as f32;
            let m: Vec<f32> = (0..c)
                .map(|ch| {
                    let plane = &feat.outer(ch)[a * hw..b * hw];
                    plane.iter().sum::<f32>() * norm
                })
                .collect();
            let mut tok = self.token.forward(&m)?;
            relu_inplace(&mut tok);
            tokens.extend(tok);
            chunk_means.push(m);
        }
        let tokens = Tensor::new(vec![n, d], tokens)?;
        check(&tokens, "token")?;

        let meta_emb = match &self.meta {
            Some(m) => embed_metadata(m, &meta_in)?,
            None => Vec::new(),
        };
        let mean_tokens = || -> Vec<f32> {
            (0..d)
                .map(|j| (0..n).map(|i| tokens.outer(i)[j]).sum::<f32>() / n as f32)
                .collect()
        };
        let (mut fused, attention) = match &self.attention {
            // residual around the attention read of the pooled video summary
            Some(a) => {
                let (mut out, tr) = mha_fuse(a, &tokens, &meta_emb)?;
                out.iter_mut().zip(mean_tokens()).for_each(|(o, m)| *o += m);
                (out, Some(tr))
            }
            None => (mean_tokens(), None),
        };
        fused.extend_from_slice(&meta_emb);
        let output = self.head.forward(&fused)?;
        if let Some(v) = output.iter().find(|v| !v.is_finite()) {
            return Err(PulmoError::numeric(
                "head",
                format!("non-finite output {v}"),
            ));
        }
        Ok(StcnnTrace {
            input: input.clone(),
            stem,
            blocks,
            chunks,
            chunk_means,
            tokens,
            meta_in,
            meta_emb,
            attention,
            fused,
            output,
        })
    }

    /// Parameter gradients given `dL/d output`.
    pub fn backward(&self, trace: &StcnnTrace, grad_output: &[f32]) -> Result<Grads> {
        if trace.blocks.len() != self.blocks.len()
            || trace.input.shape() != self.input_shape()
            || trace.fused.len() != self.head.inputs()
            || trace.attention.is_some() != self.attention.is_some()
        {
            return Err(PulmoError::Protocol(
                "trace was not produced by this network's forward pass".into(),
            ));
        }
        if grad_output.len() != self.head.outputs() {
            return Err(PulmoError::dim(
                "output gradient",
                self.head.outputs(),
                grad_output.len(),
            ));
        }
        let mut g = self.zeroed();
        let d = self.fusion.d_model;
        let n = trace.chunks.len();
        let g_fused = self
            .head
            .backward(&trace.fused, grad_output, &mut g.head, true)
            .expect("input grad");
        let (g_video, g_emb_direct) = g_fused.split_at(d);
        let mut g_emb = g_emb_direct.to_vec();

        let mut g_tokens: Vec<Vec<f32>> = match (&self.attention, &trace.attention) {
            (Some(a), Some(tr)) => {
                let ga = g.attention.as_mut().expect("attention grads");
                let (g_q, mut g_tok) = a.backward(&trace.meta_emb, &trace.tokens, tr, g_video, ga);
                g_emb.iter_mut().zip(&g_q).for_each(|(x, y)| *x += y);
                for gt in &mut g_tok {
                    gt.iter_mut()
                        .zip(g_video)
                        .for_each(|(x, y)| *x += y / n as f32);
                }
                g_tok
            }
            _ => (0..n)
                .map(|_| g_video.iter().map(|v| v / n as f32).collect())
                .collect(),
        };

        if let (Some(m), Some(gm)) = (&self.meta, g.meta.as_mut()) {
            relu_backward_inplace(&trace.meta_emb, &mut g_emb);
            m.backward(&trace.meta_in, &g_emb, gm, false);
        }

        let feat = trace.blocks.last().map_or(&trace.stem, |t| &t.out);
        let hw = feat.dim(2) * feat.dim(3);
        let mut g_feat = Tensor::zeros(feat.shape());
        for (i, &(a, b)) in trace.chunks.iter().enumerate() {
            relu_backward_inplace(trace.tokens.outer(i), &mut g_tokens[i]);
            let g_mean = self
                .token
                .backward(&trace.chunk_means[i], &g_tokens[i], &mut g.token, true)
                .expect("input grad");
            let norm = 1.0 / ((b - a) * hw) as f32;
            for (ch, &gm) in g_mean.iter().enumerate() {
                g_feat.outer_mut(ch)[a * hw..b * hw]
                    .iter_mut()
                    .for_each(|x| *x = gm * norm);
            }
        }

        let mut grad = g_feat;
        for i in (0..self.blocks.len()).rev() {
            let x = if i == 0 {
                &trace.stem
            } else {
                &trace.blocks[i - 1].out
            };
            grad = self.blocks[i].backward(x, &trace.blocks[i], &grad, &mut g.blocks[i])?;
        }
        relu_backward_inplace(trace.stem.data(), grad.data_mut());
        self.stem
            .backward(&trace.input, &grad, &mut g.stem, false)?;

        Ok(Grads(
            g.params().into_iter().map(|(_, t)| t.clone()).collect(),
        ))
    }

    fn zeroed(&self) -> StcnnNet {
        StcnnNet {
            expansion: self.expansion,
            fusion: self.fusion,
            head_kind: self.head_kind,
            in_channels: self.in_channels,
            stem: self.stem.zeroed(),
            blocks: self.blocks.iter().map(Block::zeroed).collect(),
            token: self.token.zeroed(),
            meta: self.meta.as_ref().map(Dense::zeroed),
            attention: self.attention.as_ref().map(Attention::zeroed),
            head: self.head.zeroed(),
        }
    }
}

impl Parameterized for StcnnNet {
    fn params(&self) -> Vec<(String, &Tensor)> {
        let mut v = vec![
            ("stem.weight".to_string(), &self.stem.weight),
            ("stem.bias".to_string(), &self.stem.bias),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            b.named(&format!("blocks.{i}"), &mut v);
        }
        v.push(("token.weight".into(), &self.token.weight));
        v.push(("token.bias".into(), &self.token.bias));
        if let Some(m) = &self.meta {
            v.push(("meta.weight".into(), &m.weight));
            v.push(("meta.bias".into(), &m.bias));
        }
        if let Some(a) = &self.attention {
            for (name, d) in [("q", &a.q), ("k", &a.k), ("v", &a.v), ("o", &a.o)] {
                v.push((format!("attention.{name}.weight"), &d.weight));
                v.push((format!("attention.{name}.bias"), &d.bias));
            }
        }
        v.push(("head.weight".into(), &self.head.weight));
        v.push(("head.bias".into(), &self.head.bias));
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = vec![&mut self.stem.weight, &mut self.stem.bias];
        for b in &mut self.blocks {
            b.tensors_mut(&mut v);
        }
        v.push(&mut self.token.weight);
        v.push(&mut self.token.bias);
        if let Some(m) = &mut self.meta {
            v.push(&mut m.weight);
            v.push(&mut m.bias);
        }
        if let Some(a) = &mut self.attention {
            for d in [&mut a.q, &mut a.k, &mut a.v, &mut a.o] {
                v.push(&mut d.weight);
                v.push(&mut d.bias);
            }
        }
        v.push(&mut self.head.weight);
        v.push(&mut self.head.bias);
        v
    }
}
