use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::compute::Matrix;
use crate::error::{Error, Result};

/// Which way the image enters the language model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    /// No visual input; zero initial state; tied embedding/softmax weights.
    Text,
    /// Visual initial state and tied embedding/softmax weights.
    A,
    /// Visual initial state, independent softmax weights.
    ANoShare,
    /// Zero initial state; final state pulled towards the projected image.
    B,
    /// Zero initial state; word embeddings pulled towards the projected image.
    C,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Text,
        Variant::A,
        Variant::ANoShare,
        Variant::B,
        Variant::C,
    ];

    /// The softmax matrix is the embedding table itself.
    pub fn shares_softmax(self) -> bool {
        matches!(self, Variant::Text | Variant::A)
    }

    pub fn uses_features(self) -> bool {
        self != Variant::Text
    }

    /// h_0 comes from the image rather than zeros.
    pub fn visual_init(self) -> bool {
        matches!(self, Variant::A | Variant::ANoShare)
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Text => "text",
            Variant::A => "a",
            Variant::ANoShare => "a-noshare",
            Variant::B => "b",
            Variant::C => "c",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown variant {s:?} (expected text, a, a-noshare, b or c)"
                ))
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub vocab: usize,
    pub embed: usize,
    pub state: usize,
    pub feature: usize,
}

/// All trainable tensors of one model.
///
/// In the shared variants the softmax matrix is not stored separately:
/// [`ModelParams::softmax`] and [`ModelParams::softmax_mut`] hand out the
/// embedding table, so a write through one view is visible through the other.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    variant: Variant,
    dims: Dims,
    /// Word embeddings, `V × d_e`.
    pub embedding: Matrix,
    separate_softmax: Option<Matrix>,
    /// Gate weights, `d_h × (d_e + d_h)`.
    pub w_reset: Matrix,
    pub w_update: Matrix,
    pub w_candidate: Matrix,
    pub b_reset: Vec<f64>,
    pub b_update: Vec<f64>,
    pub b_candidate: Vec<f64>,
    /// Maps a state into embedding space before scoring, `d_e × d_h`.
    pub w_decode: Matrix,
    pub b_softmax: Vec<f64>,
    /// Image projection: `d_h × F` for A/A-noshare/B, `d_e × F` for C.
    pub w_image: Option<Matrix>,
    pub b_image: Option<Vec<f64>>,
}

impl ModelParams {
    pub fn zeros(variant: Variant, dims: Dims) -> Self {
        let Dims {
            vocab: v,
            embed: e,
            state: h,
            feature: f,
        } = dims;
        let image_rows = if variant == Variant::C { e } else { h };
        ModelParams {
            variant,
            dims,
            embedding: Matrix::zeros(v, e),
            separate_softmax: (!variant.shares_softmax()).then(|| Matrix::zeros(v, e)),
            w_reset: Matrix::zeros(h, e + h),
            w_update: Matrix::zeros(h, e + h),
            w_candidate: Matrix::zeros(h, e + h),
            b_reset: vec![0.0; h],
            b_update: vec![0.0; h],
            b_candidate: vec![0.0; h],
            w_decode: Matrix::zeros(e, h),
            b_softmax: vec![0.0; v],
            w_image: variant
                .uses_features()
                .then(|| Matrix::zeros(image_rows, f)),
            b_image: variant.uses_features().then(|| vec![0.0; image_rows]),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.variant, self.dims)
    }

    pub fn variant(&self) -> Variant {
        self.variant
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn softmax(&self) -> &Matrix {
        self.separate_softmax.as_ref().unwrap_or(&self.embedding)
    }

    pub fn softmax_mut(&mut self) -> &mut Matrix {
        self.separate_softmax.as_mut().unwrap_or(&mut self.embedding)
    }

    /// Named tensors in a fixed order. The tied softmax is listed once, as
    /// the embedding.
    pub fn tensors(&self) -> Vec<(&'static str, &[f64])> {
        let mut out: Vec<(&'static str, &[f64])> = vec![("embedding", self.embedding.as_slice())];
        if let Some(m) = &self.separate_softmax {
            out.push(("softmax", m.as_slice()));
        }
        out.extend([
            ("w_reset", self.w_reset.as_slice()),
            ("w_update", self.w_update.as_slice()),
            ("w_candidate", self.w_candidate.as_slice()),
            ("b_reset", self.b_reset.as_slice()),
            ("b_update", self.b_update.as_slice()),
            ("b_candidate", self.b_candidate.as_slice()),
            ("w_decode", self.w_decode.as_slice()),
            ("b_softmax", self.b_softmax.as_slice()),
        ]);
        if let (Some(w), Some(b)) = (&self.w_image, &self.b_image) {
            out.push(("w_image", w.as_slice()));
            out.push(("b_image", b.as_slice()));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(&'static str, &mut [f64])> {
        let mut out: Vec<(&'static str, &mut [f64])> =
            vec![("embedding", self.embedding.as_mut_slice())];
        if let Some(m) = &mut self.separate_softmax {
            out.push(("softmax", m.as_mut_slice()));
        }
        out.extend([
            ("w_reset", self.w_reset.as_mut_slice()),
            ("w_update", self.w_update.as_mut_slice()),
            ("w_candidate", self.w_candidate.as_mut_slice()),
            ("b_reset", self.b_reset.as_mut_slice()),
            ("b_update", self.b_update.as_mut_slice()),
            ("b_candidate", self.b_candidate.as_mut_slice()),
            ("w_decode", self.w_decode.as_mut_slice()),
            ("b_softmax", self.b_softmax.as_mut_slice()),
        ]);
        if let (Some(w), Some(b)) = (&mut self.w_image, &mut self.b_image) {
            out.push(("w_image", w.as_mut_slice()));
            out.push(("b_image", b.as_mut_slice()));
        }
        out
    }

    pub fn num_values(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// All values concatenated in [`Self::tensors`] order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_values());
        for (_, t) in self.tensors() {
            out.extend_from_slice(t);
        }
        out
    }

    pub fn assign_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_values() {
            return Err(Error::Shape(format!(
                "{} values for a model with {}",
                flat.len(),
                self.num_values()
            )));
        }
        let mut offset = 0;
        for (_, t) in self.tensors_mut() {
            t.copy_from_slice(&flat[offset..offset + t.len()]);
            offset += t.len();
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|(_, t)| t.iter().all(|x| x.is_finite()))
    }
}

/// Gradient buffers shaped exactly like a model's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct GradTape {
    grads: ModelParams,
}

impl GradTape {
    pub fn for_params(params: &ModelParams) -> Self {
        GradTape {
            grads: params.zeros_like(),
        }
    }

    pub fn zero(&mut self) {
        for (_, t) in self.grads.tensors_mut() {
            t.iter_mut().for_each(|x| *x = 0.0);
        }
    }

    pub fn grads(&self) -> &ModelParams {
        &self.grads
    }

    pub fn grads_mut(&mut self) -> &mut ModelParams {
        &mut self.grads
    }

    pub fn add_assign(&mut self, other: &GradTape) {
        for ((_, a), (_, b)) in self.grads.tensors_mut().into_iter().zip(other.grads.tensors()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for (_, t) in self.grads.tensors_mut() {
            t.iter_mut().for_each(|x| *x *= s);
        }
    }

    /// Global L2 norm over every tensor.
    pub fn norm(&self) -> f64 {
        self.grads
            .tensors()
            .iter()
            .flat_map(|(_, t)| t.iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.grads.is_finite()
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.grads.flatten()
    }
}
