//! Trainable convolution and dense layers with explicit backward passes.

use rand::Rng;

use crate::error::{PulmoError, Result};
use crate::numerics::init::kaiming_uniform;
use crate::numerics::{
    conv3d, conv3d_backward, conv3d_depthwise, conv3d_depthwise_backward, linear_backward,
    linear_slice, relu_backward_inplace, relu_inplace, Tensor,
};

/// 3-d convolution with bias. Depthwise layers hold `[C,1,kt,kh,kw]`
/// kernels, dense layers `[F,C,kt,kh,kw]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv3d {
    pub weight: Tensor,
    pub bias: Tensor,
    pub stride: [usize; 3],
    pub pad: [usize; 3],
    pub depthwise: bool,
}

impl Conv3d {
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn new<R: Rng + ?Sized>(
        c_in: usize,
        c_out: usize,
        kernel: [usize; 3],
        stride: [usize; 3],
        pad: [usize; 3],
        depthwise: bool,
        gain: f32,
        rng: &mut R,
    ) -> Self {
        let group = if depthwise { 1 } else { c_in };
        let fan_in = group * kernel.iter().product::<usize>();
        Conv3d {
            weight: kaiming_uniform(
                &[c_out, group, kernel[0], kernel[1], kernel[2]],
                fan_in,
                gain,
                rng,
            ),
            bias: Tensor::zeros(&[c_out]),
            stride,
            pad,
            depthwise,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut y = if self.depthwise {
            conv3d_depthwise(x, &self.weight, self.stride, self.pad)?
        } else {
            conv3d(x, &self.weight, self.stride, self.pad)?
        };
        let plane = y.len() / y.dim(0);
        for (c, chunk) in y.data_mut().chunks_mut(plane).enumerate() {
            let b = self.bias.data()[c];
            chunk.iter_mut().for_each(|v| *v += b);
        }
        Ok(y)
    }

    /// Accumulate parameter gradients into `grad` (same layout as `self`)
    /// and return the input gradient when requested.
    pub fn backward(
        &self,
        x: &Tensor,
        grad_out: &Tensor,
        grad: &mut Conv3d,
        want_input: bool,
    ) -> Result<Option<Tensor>> {
        let (gi, gw) = if self.depthwise {
            conv3d_depthwise_backward(x, &self.weight, grad_out, self.stride, self.pad, want_input)?
        } else {
            conv3d_backward(x, &self.weight, grad_out, self.stride, self.pad, want_input)?
        };
        grad.weight.add_assign(&gw)?;
        let plane = grad_out.len() / grad_out.dim(0);
        for (c, chunk) in grad_out.data().chunks(plane).enumerate() {
            grad.bias.data_mut()[c] += chunk.iter().sum::<f32>();
        }
        Ok(gi)
    }

    pub(crate) fn zeroed(&self) -> Self {
        Conv3d {
            weight: Tensor::zeros(self.weight.shape()),
            bias: Tensor::zeros(self.bias.shape()),
            ..self.clone()
        }
    }
}

/// Fully connected layer `y = W x + b`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Dense {
    pub(crate) fn new<R: Rng + ?Sized>(
        inputs: usize,
        outputs: usize,
        gain: f32,
        rng: &mut R,
    ) -> Self {
        Dense {
            weight: kaiming_uniform(&[outputs, inputs], inputs, gain, rng),
            bias: Tensor::zeros(&[outputs]),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.dim(1)
    }

    pub fn outputs(&self) -> usize {
        self.weight.dim(0)
    }

    pub fn forward(&self, x: &[f32]) -> Result<Vec<f32>> {
        linear_slice(x, &self.weight, &self.bias)
    }

    pub fn backward(
        &self,
        x: &[f32],
        grad_out: &[f32],
        grad: &mut Dense,
        want_input: bool,
    ) -> Option<Vec<f32>> {
        linear_backward(
            x,
            &self.weight,
            grad_out,
            &mut grad.weight,
            &mut grad.bias,
            want_input,
        )
    }

    pub(crate) fn zeroed(&self) -> Self {
        Dense {
            weight: Tensor::zeros(self.weight.shape()),
            bias: Tensor::zeros(self.bias.shape()),
        }
    }
}

/// Residual bottleneck block: pointwise expand, depthwise 1x3x3 (spatial
/// stride), depthwise 3x1x1, pointwise project, identity or strided
/// pointwise shortcut, ReLU after every stage except the projection.
#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub expand: Conv3d,
    pub spatial: Conv3d,
    pub temporal: Conv3d,
    pub project: Conv3d,
    pub shortcut: Option<Conv3d>,
}

/// Activations of one block needed by its backward pass.
#[derive(Clone, Debug)]
pub(crate) struct BlockTrace {
    a1: Tensor,
    a2: Tensor,
    a3: Tensor,
    pub(crate) out: Tensor,
}

pub(crate) fn check(t: &Tensor, layer: &str) -> Result<()> {
    if let Some(v) = t.data().iter().find(|v| !v.is_finite()) {
        return Err(PulmoError::numeric(
            layer,
            format!("non-finite activation {v}"),
        ));
    }
    Ok(())
}

impl Block {
    pub(crate) fn new<R: Rng + ?Sized>(
        c_in: usize,
        c_out: usize,
        bottleneck: usize,
        stride: usize,
        gains: (f32, f32),
        rng: &mut R,
    ) -> Self {
        let (relu, linear) = gains;
        let shortcut = (stride != 1 || c_in != c_out).then(|| {
            Conv3d::new(
                c_in,
                c_out,
                [1, 1, 1],
                [1, stride, stride],
                [0; 3],
                false,
                linear,
                rng,
            )
        });
        Block {
            expand: Conv3d::new(
                c_in,
                bottleneck,
                [1, 1, 1],
                [1; 3],
                [0; 3],
                false,
                relu,
                rng,
            ),
            spatial: Conv3d::new(
                bottleneck,
                bottleneck,
                [1, 3, 3],
                [1, stride, stride],
                [0, 1, 1],
                true,
                relu,
                rng,
            ),
            temporal: Conv3d::new(
                bottleneck,
                bottleneck,
                [3, 1, 1],
                [1; 3],
                [1, 0, 0],
                true,
                relu,
                rng,
            ),
            project: Conv3d::new(
                bottleneck,
                c_out,
                [1, 1, 1],
                [1; 3],
                [0; 3],
                false,
                linear,
                rng,
            ),
            shortcut,
        }
    }

    pub(crate) fn forward(&self, x: &Tensor, name: &str) -> Result<BlockTrace> {
        let stage = |layer: &Conv3d, input: &Tensor, part: &str, relu: bool| -> Result<Tensor> {
            let mut y = layer.forward(input)?;
            if relu {
                relu_inplace(y.data_mut());
            }
            check(&y, &format!("{name}.{part}"))?;
            Ok(y)
        };
        let a1 = stage(&self.expand, x, "expand", true)?;
        let a2 = stage(&self.spatial, &a1, "spatial", true)?;
        let a3 = stage(&self.temporal, &a2, "temporal", true)?;
        let mut out = stage(&self.project, &a3, "project", false)?;
        match &self.shortcut {
            Some(sc) => out.add_assign(&stage(sc, x, "shortcut", false)?)?,
            None => out.add_assign(x)?,
        }
        relu_inplace(out.data_mut());
        Ok(BlockTrace { a1, a2, a3, out })
    }

    /// Gradient with respect to the block input.
    pub(crate) fn backward(
        &self,
        x: &Tensor,
        trace: &BlockTrace,
        grad_out: &Tensor,
        grad: &mut Block,
    ) -> Result<Tensor> {
        let mut g_sum = grad_out.clone();
        relu_backward_inplace(trace.out.data(), g_sum.data_mut());
        let mut g_x = match (&self.shortcut, &mut grad.shortcut) {
            (Some(sc), Some(gsc)) => sc.backward(x, &g_sum, gsc, true)?.expect("input grad"),
            _ => g_sum.clone(),
        };
        let mut g = self
            .project
            .backward(&trace.a3, &g_sum, &mut grad.project, true)?
            .expect("input grad");
        relu_backward_inplace(trace.a3.data(), g.data_mut());
        let mut g = self
            .temporal
            .backward(&trace.a2, &g, &mut grad.temporal, true)?
            .expect("input grad");
        relu_backward_inplace(trace.a2.data(), g.data_mut());
        let mut g = self
            .spatial
            .backward(&trace.a1, &g, &mut grad.spatial, true)?
            .expect("input grad");
        relu_backward_inplace(trace.a1.data(), g.data_mut());
        let g = self
            .expand
            .backward(x, &g, &mut grad.expand, true)?
            .expect("input grad");
        g_x.add_assign(&g)?;
        Ok(g_x)
    }

    pub(crate) fn zeroed(&self) -> Self {
        Block {
            expand: self.expand.zeroed(),
            spatial: self.spatial.zeroed(),
            temporal: self.temporal.zeroed(),
            project: self.project.zeroed(),
            shortcut: self.shortcut.as_ref().map(Conv3d::zeroed),
        }
    }

    pub(crate) fn named<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        let mut push = |part: &str, c: &'a Conv3d| {
            out.push((format!("{prefix}.{part}.weight"), &c.weight));
            out.push((format!("{prefix}.{part}.bias"), &c.bias));
        };
        push("expand", &self.expand);
        push("spatial", &self.spatial);
        push("temporal", &self.temporal);
        push("project", &self.project);
        if let Some(sc) = &self.shortcut {
            push("shortcut", sc);
        }
    }

    pub(crate) fn tensors_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor>) {
        for c in [
            &mut self.expand,
            &mut self.spatial,
            &mut self.temporal,
            &mut self.project,
        ] {
            out.push(&mut c.weight);
            out.push(&mut c.bias);
        }
        if let Some(sc) = &mut self.shortcut {
            out.push(&mut sc.weight);
            out.push(&mut sc.bias);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn strided_block_shapes() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let b = Block::new(4, 6, 5, 2, (1.4, 0.6), &mut rng);
        let x = Tensor::from_fn(&[4, 3, 8, 8], |i| (i % 7) as f32 / 7.0);
        let tr = b.forward(&x, "b").unwrap();
        assert_eq!(tr.out.shape(), &[6, 3, 4, 4]);
        assert!(tr.out.data().iter().all(|&v| v >= 0.0));
        let mut g = b.zeroed();
        let gx = b
            .backward(&x, &tr, &Tensor::full(&[6, 3, 4, 4], 1.0), &mut g)
            .unwrap();
        assert_eq!(gx.shape(), x.shape());
    }

    #[test]
    fn identity_block_passes_input_when_branch_is_zero() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut b = Block::new(3, 3, 2, 1, (1.4, 0.6), &mut rng);
        b.project.weight.fill(0.0);
        let x = Tensor::from_fn(&[3, 2, 4, 4], |i| i as f32);
        assert_eq!(b.forward(&x, "b").unwrap().out, x);
    }
}
