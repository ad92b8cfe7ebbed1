//! GRU language model over image-paired sentences.
//!
//! Five variants share one code path and differ only in how the image enters:
//! as the initial state (A, A-noshare), as a pull on the final state (B), as a
//! pull on each word embedding (C), or not at all (text). Text and A tie the
//! softmax weights to the embedding table.

mod check;
mod forward;
mod gru;
mod params;
mod softmax;

pub use check::{batch_loss, check_model_gradients};
pub use forward::{
    project_image, sentence_forward, visual_init, ImageProjection, LossConfig, SentenceLoss,
    NORM_EPS,
};
pub use gru::{gru_backward, gru_step, GruCache};
pub use params::{Dims, GradTape, ModelParams, Variant};
pub use softmax::{sampled_softmax_loss, NegativeSampler, SoftmaxGrad};

#[cfg(test)]
mod tests;
