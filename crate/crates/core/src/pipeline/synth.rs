//! Seeded stand-ins for the text encoder, the image-prompt encoder and the
//! latent. Every tensor has its own splitmix64 stream keyed by
//! `(seed, role, index...)`, with standard normal entries divided by the
//! square root of the feature width.

use crate::numkernel::Matrix;
use crate::rng::{role, SplitMix64};

use super::config::StoryConfig;

fn normal_block(rows: usize, cols: usize, scale_dim: usize, labels: &[u64], seed: u64) -> Matrix {
    let mut rng = SplitMix64::for_stream(seed, labels);
    let s = 1.0 / (scale_dim as f64).sqrt();
    Matrix::from_fn(rows, cols, |_, _| rng.normal() * s)
}

/// Token embeddings of one frame, `D x per_frame` (one column per token).
pub fn frame_tokens(cfg: &StoryConfig, frame: usize) -> Matrix {
    let d = cfg.tokens.dim;
    normal_block(d, cfg.tokens.per_frame, d, &[role::TOKENS, frame as u64], cfg.seed)
}

/// IP tokens of one subject, `ip_tokens x D`.
pub fn subject_ip_tokens(cfg: &StoryConfig, subject: usize) -> Matrix {
    let d = cfg.tokens.dim;
    let n = cfg.subjects[subject].ip_tokens;
    normal_block(n, d, d, &[role::IP_TOKENS, subject as u64], cfg.seed)
}

/// Initial hidden state of one layer in one frame, `P x d_model`.
pub fn initial_hidden(cfg: &StoryConfig, frame: usize, layer: usize) -> Matrix {
    let spec = &cfg.layers[layer];
    normal_block(
        spec.grid.len(),
        spec.d_model,
        spec.d_model,
        &[role::HIDDEN, frame as u64, layer as u64],
        cfg.seed,
    )
}

/// Every generated input of a story.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthStory {
    /// Per-frame token blocks, `D x per_frame` each.
    pub blocks: Vec<Matrix>,
    /// All subjects' IP tokens stacked in subject order.
    pub ip: Matrix,
}

pub fn synth_story(cfg: &StoryConfig) -> SynthStory {
    let blocks = (0..cfg.frames).map(|f| frame_tokens(cfg, f)).collect();
    let mut ip = Matrix::zeros(0, cfg.tokens.dim);
    for s in 0..cfg.subjects.len() {
        ip = Matrix::vstack(&ip, &subject_ip_tokens(cfg, s)).expect("shared width");
    }
    SynthStory { blocks, ip }
}
