//! One GRU step and its backward pass.
//!
//! ```text
//! r = σ(W_r [e, h'] + b_r)
//! u = σ(W_u [e, h'] + b_u)
//! c = tanh(W_c [e, r ⊙ h'] + b_c)
//! h = u ⊙ h' + (1 − u) ⊙ c
//! ```

use crate::compute::{affine_backward, matvec_acc, sigmoid, Matrix};
use crate::error::{Error, Result};

use super::params::ModelParams;

/// Values from the forward pass needed by [`gru_backward`].
#[derive(Debug, Clone, PartialEq)]
pub struct GruCache {
    /// `[e, h_prev]`
    pub input: Vec<f64>,
    /// `[e, r ⊙ h_prev]`
    pub gated_input: Vec<f64>,
    pub reset: Vec<f64>,
    pub update: Vec<f64>,
    pub candidate: Vec<f64>,
    pub h: Vec<f64>,
}

impl GruCache {
    pub fn h_prev(&self) -> &[f64] {
        &self.input[self.input.len() - self.h.len()..]
    }
}

fn gate(w: &Matrix, b: &[f64], x: &[f64], f: impl Fn(f64) -> f64) -> Vec<f64> {
    let mut a = b.to_vec();
    matvec_acc(w, x, &mut a);
    a.iter_mut().for_each(|v| *v = f(*v));
    a
}

pub fn gru_step(params: &ModelParams, e: &[f64], h_prev: &[f64]) -> Result<(Vec<f64>, GruCache)> {
    let dims = params.dims();
    if e.len() != dims.embed || h_prev.len() != dims.state {
        return Err(Error::Shape(format!(
            "gru_step: got e[{}], h[{}]; model wants e[{}], h[{}]",
            e.len(),
            h_prev.len(),
            dims.embed,
            dims.state
        )));
    }
    let mut input = Vec::with_capacity(e.len() + h_prev.len());
    input.extend_from_slice(e);
    input.extend_from_slice(h_prev);

    let reset = gate(&params.w_reset, &params.b_reset, &input, sigmoid);
    let update = gate(&params.w_update, &params.b_update, &input, sigmoid);

    let mut gated_input = Vec::with_capacity(input.len());
    gated_input.extend_from_slice(e);
    gated_input.extend(reset.iter().zip(h_prev).map(|(r, h)| r * h));
    let candidate = gate(&params.w_candidate, &params.b_candidate, &gated_input, f64::tanh);

    let h: Vec<f64> = update
        .iter()
        .zip(h_prev)
        .zip(&candidate)
        .map(|((u, hp), c)| u * hp + (1.0 - u) * c)
        .collect();

    let cache = GruCache {
        input,
        gated_input,
        reset,
        update,
        candidate,
        h: h.clone(),
    };
    Ok((h, cache))
}

/// Accumulates gate weight/bias gradients into `grads` and returns
/// `(d e, d h_prev)`.
pub fn gru_backward(
    params: &ModelParams,
    cache: &GruCache,
    dh: &[f64],
    grads: &mut ModelParams,
) -> (Vec<f64>, Vec<f64>) {
    let d_e = params.dims().embed;
    let h_prev = cache.h_prev();

    let mut dh_prev: Vec<f64> = dh.iter().zip(&cache.update).map(|(d, u)| d * u).collect();
    let da_update: Vec<f64> = dh
        .iter()
        .zip(&cache.update)
        .zip(h_prev.iter().zip(&cache.candidate))
        .map(|((d, u), (hp, c))| d * (hp - c) * u * (1.0 - u))
        .collect();
    let da_candidate: Vec<f64> = dh
        .iter()
        .zip(&cache.update)
        .zip(&cache.candidate)
        .map(|((d, u), c)| d * (1.0 - u) * (1.0 - c * c))
        .collect();

    let d_gated = affine_backward(
        &params.w_candidate,
        &cache.gated_input,
        &da_candidate,
        &mut grads.w_candidate,
        &mut grads.b_candidate,
    );
    let mut de = d_gated[..d_e].to_vec();
    let d_rh = &d_gated[d_e..];
    let mut da_reset = Vec::with_capacity(h_prev.len());
    for i in 0..h_prev.len() {
        dh_prev[i] += d_rh[i] * cache.reset[i];
        let r = cache.reset[i];
        da_reset.push(d_rh[i] * h_prev[i] * r * (1.0 - r));
    }

    let dx_u = affine_backward(
        &params.w_update,
        &cache.input,
        &da_update,
        &mut grads.w_update,
        &mut grads.b_update,
    );
    let dx_r = affine_backward(
        &params.w_reset,
        &cache.input,
        &da_reset,
        &mut grads.w_reset,
        &mut grads.b_reset,
    );
    for (i, (a, b)) in dx_u.iter().zip(&dx_r).enumerate() {
        if i < d_e {
            de[i] += a + b;
        } else {
            dh_prev[i - d_e] += a + b;
        }
    }
    (de, dh_prev)
}
