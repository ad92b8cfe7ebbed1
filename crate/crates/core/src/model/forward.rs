//! Per-sentence loss and its full backward pass.

use rand::Rng;

use crate::compute::{axpy, matvec_acc, matvec_t_acc, norm, outer_acc, relu};
use crate::error::{Error, Result};
use crate::features::VisualFeature;
use crate::text::{TokenSequence, NUM_RESERVED, UNK};

use super::gru::{gru_backward, gru_step, GruCache};
use super::params::{GradTape, ModelParams, Variant};
use super::softmax::{sampled_softmax_loss, NegativeSampler, SoftmaxGrad};

/// Guard for the norm gradient at the origin.
pub const NORM_EPS: f64 = 1e-8;

/// Pre-activation and output of `ReLU(W_I f + b_I)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageProjection {
    pub pre: Vec<f64>,
    pub out: Vec<f64>,
}

pub fn project_image(params: &ModelParams, feature: &VisualFeature) -> Result<ImageProjection> {
    let (w, b) = match (&params.w_image, &params.b_image) {
        (Some(w), Some(b)) => (w, b),
        _ => {
            return Err(Error::Contract(format!(
                "variant {} has no image projection",
                params.variant()
            )))
        }
    };
    if feature.dim() != w.cols() {
        return Err(Error::Shape(format!(
            "feature has {} bits, projection expects {}",
            feature.dim(),
            w.cols()
        )));
    }
    let mut pre = b.clone();
    // Binary input: W·f is the sum of the columns at set bits.
    for (r, p) in pre.iter_mut().enumerate() {
        let row = w.row(r);
        *p += feature.ones().map(|j| row[j]).sum::<f64>();
    }
    let out = pre.iter().map(|&x| relu(x)).collect();
    Ok(ImageProjection { pre, out })
}

fn project_image_backward(
    proj: &ImageProjection,
    feature: &VisualFeature,
    d_out: &[f64],
    grads: &mut ModelParams,
) {
    let d_pre: Vec<f64> = proj
        .pre
        .iter()
        .zip(d_out)
        .map(|(p, d)| if *p > 0.0 { *d } else { 0.0 })
        .collect();
    let gw = grads.w_image.as_mut().expect("variant has an image projection");
    for (r, &d) in d_pre.iter().enumerate() {
        if d != 0.0 {
            let row = gw.row_mut(r);
            for j in feature.ones() {
                row[j] += d;
            }
        }
    }
    axpy(1.0, &d_pre, grads.b_image.as_mut().expect("variant has an image bias"));
}

/// Initial GRU state from an image: `ReLU(W_I f + b_I)`. The text variant has
/// no projection and starts from zeros.
pub fn visual_init(params: &ModelParams, feature: Option<&VisualFeature>) -> Result<Vec<f64>> {
    match params.variant() {
        Variant::Text => Ok(vec![0.0; params.dims().state]),
        Variant::C => Err(Error::Contract(
            "model C projects images into embedding space, not state space".into(),
        )),
        _ => {
            let f = feature.ok_or_else(|| Error::Data("missing visual feature".into()))?;
            Ok(project_image(params, f)?.out)
        }
    }
}

/// Settings shared by every sentence of a run.
#[derive(Debug, Clone, Copy)]
pub struct LossConfig<'a> {
    pub sampler: &'a NegativeSampler,
    pub num_negatives: usize,
    /// Weight of the image-alignment term (variants B and C).
    pub lambda: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SentenceLoss {
    /// `base + aux`
    pub total: f64,
    /// Mean sampled-softmax loss over scored positions.
    pub base: f64,
    /// Weighted image-alignment term; zero for text, A and A-noshare.
    pub aux: f64,
    pub scored: usize,
}

/// `‖a − b‖` and its gradient with respect to `a`.
fn distance_with_grad(a: &[f64], b: &[f64]) -> (f64, Vec<f64>) {
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let n = norm(&diff);
    let g = diff.iter().map(|x| x / n.max(NORM_EPS)).collect();
    (n, g)
}

struct Position {
    token: usize,
    embedded: Vec<f64>,
    cache: GruCache,
    scored: Option<SoftmaxGrad>,
}

/// Runs one sentence through the model. Inputs are `seq[..L-1]`, targets
/// `seq[1..]`; `UNK` targets are not scored. When `grads` is given, the
/// gradient of [`SentenceLoss::total`] is added into it.
pub fn sentence_forward<R: Rng + ?Sized>(
    params: &ModelParams,
    seq: &TokenSequence,
    feature: Option<&VisualFeature>,
    cfg: &LossConfig<'_>,
    rng: &mut R,
    grads: Option<&mut GradTape>,
) -> Result<SentenceLoss> {
    let variant = params.variant();
    let dims = params.dims();
    let ids = seq.ids();
    let content = seq.content().count();
    if content == 0 {
        return Err(Error::EmptySequence);
    }
    if let Some(&bad) = ids.iter().find(|&&id| id >= dims.vocab) {
        return Err(Error::Data(format!("token id {bad} outside vocabulary of {}", dims.vocab)));
    }
    let image = match (variant.uses_features(), feature) {
        (false, _) => None,
        (true, Some(f)) => Some((f, project_image(params, f)?)),
        (true, None) => return Err(Error::Data("missing visual feature".into())),
    };

    let h0 = match (&image, variant.visual_init()) {
        (Some((_, proj)), true) => proj.out.clone(),
        _ => vec![0.0; dims.state],
    };

    let softmax_w = params.softmax();
    let q = cfg.sampler.q();
    let mut positions: Vec<Position> = Vec::with_capacity(ids.len() - 1);
    let mut h = h0;
    let mut loss_sum = 0.0;
    let mut scored = 0usize;
    for t in 0..ids.len() - 1 {
        let token = ids[t];
        let target = ids[t + 1];
        let embedded = params.embedding.row(token).to_vec();
        let (h_next, cache) = gru_step(params, &embedded, &h)?;
        h = h_next;
        let sm = if target == UNK {
            None
        } else {
            let mut decoded = vec![0.0; dims.embed];
            matvec_acc(&params.w_decode, &h, &mut decoded);
            let negatives = cfg.sampler.sample(cfg.num_negatives, target, rng)?;
            let g = sampled_softmax_loss(softmax_w, &params.b_softmax, &decoded, target, &negatives, q)?;
            loss_sum += g.loss;
            scored += 1;
            Some(g)
        };
        positions.push(Position {
            token,
            embedded,
            cache,
            scored: sm,
        });
    }
    let base = loss_sum / scored as f64;

    // Image-alignment terms.
    let mut aux = 0.0;
    let mut d_h_last_aux: Option<Vec<f64>> = None;
    let mut d_embedded_aux: Vec<Option<Vec<f64>>> = vec![None; positions.len()];
    let mut d_target = image.as_ref().map(|(_, p)| vec![0.0; p.out.len()]);
    match (variant, &image) {
        (Variant::B, Some((_, proj))) => {
            let (dist, g) = distance_with_grad(&h, &proj.out);
            aux = cfg.lambda * dist;
            let dt = d_target.as_mut().unwrap();
            axpy(-cfg.lambda, &g, dt);
            d_h_last_aux = Some(g.iter().map(|x| cfg.lambda * x).collect());
        }
        (Variant::C, Some((_, proj))) => {
            let scale = cfg.lambda / content as f64;
            let dt = d_target.as_mut().unwrap();
            for (p, slot) in positions.iter().zip(d_embedded_aux.iter_mut()) {
                if p.token < NUM_RESERVED {
                    continue;
                }
                let (dist, g) = distance_with_grad(&p.embedded, &proj.out);
                aux += scale * dist;
                axpy(-scale, &g, dt);
                *slot = Some(g.iter().map(|x| scale * x).collect());
            }
        }
        _ => {}
    }

    let out = SentenceLoss {
        total: base + aux,
        base,
        aux,
        scored,
    };
    let Some(tape) = grads else {
        return Ok(out);
    };
    let g = tape.grads_mut();

    let inv = 1.0 / scored as f64;
    let mut dh = d_h_last_aux.unwrap_or_else(|| vec![0.0; dims.state]);
    for (t, p) in positions.iter().enumerate().rev() {
        if let Some(sm) = &p.scored {
            let h_t = &p.cache.h;
            let mut decoded = vec![0.0; dims.embed];
            matvec_acc(&params.w_decode, h_t, &mut decoded);
            {
                let gs = g.softmax_mut();
                for (&w, &c) in sm.candidates.iter().zip(&sm.coef) {
                    axpy(c * inv, &decoded, gs.row_mut(w));
                }
            }
            for (&w, &c) in sm.candidates.iter().zip(&sm.coef) {
                g.b_softmax[w] += c * inv;
            }
            let dd: Vec<f64> = sm.d_decoded.iter().map(|x| x * inv).collect();
            outer_acc(&mut g.w_decode, &dd, h_t);
            matvec_t_acc(&params.w_decode, &dd, &mut dh);
        }
        let (mut de, dh_prev) = gru_backward(params, &p.cache, &dh, g);
        if let Some(extra) = &d_embedded_aux[t] {
            axpy(1.0, extra, &mut de);
        }
        axpy(1.0, &de, g.embedding.row_mut(p.token));
        dh = dh_prev;
    }

    if let Some((f, proj)) = &image {
        let mut d_out = d_target.unwrap();
        if variant.visual_init() {
            axpy(1.0, &dh, &mut d_out);
        }
        project_image_backward(proj, f, &d_out, g);
    }
    Ok(out)
}
