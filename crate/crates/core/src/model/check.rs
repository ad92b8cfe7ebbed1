use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::compute::{check_gradients, GradCheckReport};
use crate::error::Result;
use crate::features::VisualFeature;
use crate::text::TokenSequence;

use super::forward::{sentence_forward, LossConfig};
use super::params::{GradTape, ModelParams};

/// Summed loss of a fixed batch. The sampler rng is reseeded on every call
/// so each evaluation sees the same negatives.
pub fn batch_loss(
    params: &ModelParams,
    batch: &[(TokenSequence, Option<VisualFeature>)],
    cfg: &LossConfig<'_>,
    seed: u64,
    grads: Option<&mut GradTape>,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    let mut grads = grads;
    for (seq, f) in batch {
        total += sentence_forward(params, seq, f.as_ref(), cfg, &mut rng, grads.as_deref_mut())?.total;
    }
    Ok(total)
}

/// Central-difference check of every parameter of `params` on `batch`.
pub fn check_model_gradients(
    params: &ModelParams,
    batch: &[(TokenSequence, Option<VisualFeature>)],
    cfg: &LossConfig<'_>,
    seed: u64,
    step: f64,
    tol: f64,
) -> Result<GradCheckReport> {
    let mut tape = GradTape::for_params(params);
    batch_loss(params, batch, cfg, seed, Some(&mut tape))?;
    let mut probe = params.clone();
    check_gradients(
        |flat| {
            probe.assign_flat(flat)?;
            batch_loss(&probe, batch, cfg, seed, None)
        },
        &params.flatten(),
        &tape.flatten(),
        step,
        tol,
    )
}
