use serde::{Deserialize, Serialize};

use crate::error::{PulmoError, Result};
use crate::numerics::Tensor;

/// Leaky integrate-and-fire constants for one layer.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LifParams {
    /// Membrane decay per timestep, in (0, 1).
    pub beta: f32,
    /// Firing threshold, > 0.
    pub v_th: f32,
    /// Sharpness `k` of the fast-sigmoid surrogate, > 0.
    pub surrogate_slope: f32,
}

impl Default for LifParams {
    fn default() -> Self {
        LifParams {
            beta: 0.9,
            v_th: 1.0,
            surrogate_slope: 25.0,
        }
    }
}

impl LifParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.beta < 1.0) {
            return Err(PulmoError::Config(format!(
                "LIF beta must lie in (0,1), got {}",
                self.beta
            )));
        }
        if !(self.v_th > 0.0 && self.v_th.is_finite()) {
            return Err(PulmoError::Config(format!(
                "LIF threshold must be > 0, got {}",
                self.v_th
            )));
        }
        if !(self.surrogate_slope > 0.0 && self.surrogate_slope.is_finite()) {
            return Err(PulmoError::Config(format!(
                "surrogate slope must be > 0, got {}",
                self.surrogate_slope
            )));
        }
        Ok(())
    }
}

/// Membrane potentials of one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LifState {
    pub v: Tensor,
}

impl LifState {
    pub fn zeros(shape: &[usize]) -> Self {
        LifState {
            v: Tensor::zeros(shape),
        }
    }
}

/// How the forward pass turns membrane potential into output.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum SpikeFn {
    /// Binary Heaviside spikes (`m >= V_th`).
    #[default]
    Heaviside,
    /// The antiderivative of the surrogate, used to check gradients against
    /// finite differences: `0.5 + u / (1 + k|u|)`.
    Smooth,
}

impl SpikeFn {
    #[inline]
    pub fn apply(self, u: f32, slope: f32) -> f32 {
        match self {
            // u = m - V_th, so u >= 0 <=> m >= V_th
            SpikeFn::Heaviside => {
                if u >= 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            SpikeFn::Smooth => 0.5 + u / (1.0 + slope * u.abs()),
        }
    }
}

/// Fast-sigmoid surrogate for the Heaviside derivative: `1 / (1 + k|u|)^2`.
#[inline]
pub fn surrogate_grad(u: f32, slope: f32) -> f32 {
    let d = 1.0 + slope * u.abs();
    1.0 / (d * d)
}

/// One timestep for a whole layer:
/// `m = beta*v + I`, `s = [m >= V_th]`, `v' = m - s*V_th`.
pub fn lif_step(
    state: &LifState,
    input_current: &Tensor,
    params: &LifParams,
) -> Result<(Tensor, LifState)> {
    input_current.expect_shape("LIF input current", state.v.shape())?;
    input_current.check_finite("LIF input current")?;
    let mut v = state.v.clone();
    let mut spikes = Tensor::zeros(state.v.shape());
    let mut u = vec![0.0; v.len()];
    lif_step_slice(
        v.data_mut(),
        input_current.data(),
        params,
        SpikeFn::Heaviside,
        spikes.data_mut(),
        &mut u,
    );
    Ok((spikes, LifState { v }))
}

/// In-place kernel behind [`lif_step`]. Writes spikes and the pre-reset
/// offset `u = m - V_th` (needed by the surrogate during BPTT).
#[inline]
pub fn lif_step_slice(
    v: &mut [f32],
    current: &[f32],
    p: &LifParams,
    spike_fn: SpikeFn,
    spikes: &mut [f32],
    u_out: &mut [f32],
) {
    for (((vi, &ii), si), ui) in v.iter_mut().zip(current).zip(spikes).zip(u_out) {
        let m = p.beta * *vi + ii;
        let u = m - p.v_th;
        let s = spike_fn.apply(u, p.surrogate_slope);
        *vi = m - s * p.v_th;
        *si = s;
        *ui = u;
    }
}

/// Run a layer of `n` neurons over `T = currents.len() / n` timesteps from
/// rest. Returns `(spikes, u)`, both `[T, n]`.
pub fn lif_run(
    currents: &[f32],
    n: usize,
    p: &LifParams,
    spike_fn: SpikeFn,
) -> (Vec<f32>, Vec<f32>) {
    let mut v = vec![0.0f32; n];
    let mut spikes = vec![0.0f32; currents.len()];
    let mut u = vec![0.0f32; currents.len()];
    for ((i_t, s_t), u_t) in currents
        .chunks(n)
        .zip(spikes.chunks_mut(n))
        .zip(u.chunks_mut(n))
    {
        lif_step_slice(&mut v, i_t, p, spike_fn, s_t, u_t);
    }
    (spikes, u)
}

/// Backpropagate through [`lif_run`]. `grad_spikes` is the loss gradient
/// reaching each `s_t` from downstream; returns the gradient at each input
/// current `I_t` (equal to the gradient at `m_t`).
///
/// With `v_t = m_t - V_th s_t` and `m_{t+1} = beta v_t + I_{t+1}`:
/// `dm_t = (ds_t - V_th dv_t) g(u_t) + dv_t`, `dv_{t-1} = beta dm_t`.
pub fn lif_backward(grad_spikes: &[f32], u: &[f32], n: usize, p: &LifParams) -> Vec<f32> {
    let t_steps = u.len() / n;
    let mut dm = vec![0.0f32; u.len()];
    let mut dv = vec![0.0f32; n];
    for t in (0..t_steps).rev() {
        let r = t * n..(t + 1) * n;
        for (((dmi, dvi), &ds), &ui) in dm[r.clone()]
            .iter_mut()
            .zip(dv.iter_mut())
            .zip(&grad_spikes[r.clone()])
            .zip(&u[r])
        {
            let g = surrogate_grad(ui, p.surrogate_slope);
            let d = (ds - p.v_th * *dvi) * g + *dvi;
            *dmi = d;
            *dvi = p.beta * d;
        }
    }
    dm
}

/// A binary spike tensor whose leading axis is time.
#[derive(Clone, Debug, PartialEq)]
pub struct SpikeTrain {
    spikes: Tensor,
}

impl SpikeTrain {
    pub fn new(spikes: Tensor) -> Result<Self> {
        if let Some(v) = spikes.data().iter().find(|&&v| v != 0.0 && v != 1.0) {
            return Err(PulmoError::Domain(format!(
                "spike train must be binary, found {v}"
            )));
        }
        if spikes.rank() < 2 {
            return Err(PulmoError::dim("spike train rank", ">= 2", spikes.rank()));
        }
        Ok(SpikeTrain { spikes })
    }

    pub(crate) fn from_binary_unchecked(spikes: Tensor) -> Self {
        debug_assert!(spikes.data().iter().all(|&v| v == 0.0 || v == 1.0));
        SpikeTrain { spikes }
    }

    pub fn timesteps(&self) -> usize {
        self.spikes.dim(0)
    }

    /// Feature shape of one timestep.
    pub fn frame_shape(&self) -> &[usize] {
        &self.spikes.shape()[1..]
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        self.spikes.outer(t)
    }

    pub fn tensor(&self) -> &Tensor {
        &self.spikes
    }

    pub fn rate(&self) -> f64 {
        self.spikes.data().iter().map(|&x| x as f64).sum::<f64>() / self.spikes.len() as f64
    }
}
