//! Sampled softmax over a target word plus drawn negatives, and the
//! log-frequency proposal the negatives are drawn from.

use std::collections::HashSet;

use rand::Rng;
use rand_distr::weighted::WeightedAliasIndex;
use rand_distr::Distribution;

use crate::compute::{axpy, dot, Matrix};
use crate::error::{Error, Result};
use crate::text::{Vocabulary, EOS, NUM_RESERVED};

/// Loss and gradients of one scored position.
///
/// The gradient with respect to softmax row `candidates[j]` is
/// `coef[j] · d` and with respect to its bias `coef[j]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftmaxGrad {
    pub loss: f64,
    pub candidates: Vec<usize>,
    pub coef: Vec<f64>,
    pub d_decoded: Vec<f64>,
}

/// Cross-entropy of `target` against `{target} ∪ negatives`, with logits
/// `U[w]·d + b[w] − ln q(w)`.
pub fn sampled_softmax_loss(
    weights: &Matrix,
    bias: &[f64],
    decoded: &[f64],
    target: usize,
    negatives: &[usize],
    q: &[f64],
) -> Result<SoftmaxGrad> {
    if decoded.len() != weights.cols() {
        return Err(Error::Shape(format!(
            "decoded vector has {} dims, softmax rows have {}",
            decoded.len(),
            weights.cols()
        )));
    }
    let mut candidates = Vec::with_capacity(negatives.len() + 1);
    candidates.push(target);
    candidates.extend_from_slice(negatives);

    let mut seen = HashSet::with_capacity(candidates.len());
    for &w in &candidates {
        if w >= weights.rows() || w >= bias.len() || w >= q.len() {
            return Err(Error::Contract(format!("candidate {w} outside the vocabulary")));
        }
        if !seen.insert(w) {
            return Err(Error::Contract(format!("candidate {w} appears twice")));
        }
        if !(q[w] > 0.0) {
            return Err(Error::Contract(format!("proposal probability of {w} is not positive")));
        }
    }

    let logits: Vec<f64> = candidates
        .iter()
        .map(|&w| dot(weights.row(w), decoded) + bias[w] - q[w].ln())
        .collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let loss = sum.ln() + max - logits[0];

    let mut coef: Vec<f64> = exps.iter().map(|e| e / sum).collect();
    coef[0] -= 1.0;

    let mut d_decoded = vec![0.0; decoded.len()];
    for (&w, &c) in candidates.iter().zip(&coef) {
        axpy(c, weights.row(w), &mut d_decoded);
    }
    Ok(SoftmaxGrad {
        loss,
        candidates,
        coef,
        d_decoded,
    })
}

/// Draws negatives without replacement from `q(w) ∝ ln(1 + freq(w))`.
///
/// The support is every non-reserved word with a positive count plus `EOS`,
/// which has to be a candidate because it is a prediction target.
#[derive(Debug, Clone)]
pub struct NegativeSampler {
    eligible: Vec<usize>,
    q: Vec<f64>,
    alias: WeightedAliasIndex<f64>,
}

impl NegativeSampler {
    pub fn from_vocab(vocab: &Vocabulary) -> Result<Self> {
        let weights: Vec<f64> = vocab
            .counts()
            .iter()
            .enumerate()
            .map(|(id, &c)| {
                if id == EOS || id >= NUM_RESERVED {
                    (1.0 + c as f64).ln()
                } else {
                    0.0
                }
            })
            .collect();
        Self::from_weights(weights)
    }

    /// Builds from unnormalized per-id weights; ids with weight 0 are never drawn.
    pub fn from_weights(weights: Vec<f64>) -> Result<Self> {
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Config("sampling weights must be finite and non-negative".into()));
        }
        let eligible: Vec<usize> = (0..weights.len()).filter(|&i| weights[i] > 0.0).collect();
        if eligible.is_empty() {
            return Err(Error::Config("no word is eligible for negative sampling".into()));
        }
        let total: f64 = eligible.iter().map(|&i| weights[i]).sum();
        let q: Vec<f64> = weights.iter().map(|w| w / total).collect();
        let alias = WeightedAliasIndex::new(eligible.iter().map(|&i| weights[i]).collect())
            .map_err(|e| Error::Config(format!("sampling table: {e}")))?;
        Ok(NegativeSampler { eligible, q, alias })
    }

    /// Normalized proposal probability per word id (0 outside the support).
    pub fn q(&self) -> &[f64] {
        &self.q
    }

    pub fn eligible_count(&self) -> usize {
        self.eligible.len()
    }

    /// `count` distinct ids, none equal to `exclude`.
    pub fn sample<R: Rng + ?Sized>(
        &self,
        count: usize,
        exclude: usize,
        rng: &mut R,
    ) -> Result<Vec<usize>> {
        let excluded_in_support = exclude < self.q.len() && self.q[exclude] > 0.0;
        let available = self.eligible.len() - usize::from(excluded_in_support);
        if count > available {
            return Err(Error::Config(format!(
                "cannot draw {count} negatives from {available} eligible words"
            )));
        }
        let mut out = Vec::with_capacity(count);
        let mut taken = HashSet::with_capacity(count + 1);
        taken.insert(exclude);

        // Rejection is cheap while the drawn set holds little of the mass.
        if 2 * count <= available {
            let mut attempts = 0usize;
            while out.len() < count && attempts < 100 * (count + 1) {
                attempts += 1;
                let w = self.eligible[self.alias.sample(rng)];
                if taken.insert(w) {
                    out.push(w);
                }
            }
        }
        if out.len() < count {
            // Sequential draws from the renormalized remainder.
            let mut pool: Vec<usize> = self
                .eligible
                .iter()
                .copied()
                .filter(|w| !taken.contains(w))
                .collect();
            while out.len() < count {
                let total: f64 = pool.iter().map(|&w| self.q[w]).sum();
                let mut x = rng.random::<f64>() * total;
                let mut pick = pool.len() - 1;
                for (i, &w) in pool.iter().enumerate() {
                    x -= self.q[w];
                    if x < 0.0 {
                        pick = i;
                        break;
                    }
                }
                out.push(pool.swap_remove(pick));
            }
        }
        Ok(out)
    }
}
