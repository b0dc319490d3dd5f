//! Emotion-conditioned multi-instrument symbolic music generation.
//!
//! The crate is `no_std` (with `alloc`) and holds every algorithmic piece of
//! the pipeline: Standard MIDI File decoding and encoding, the event
//! tokenizer, a small reverse-mode autograd tensor library, the
//! relative-attention transformer with its conditioning variants, training
//! primitives, nucleus sampling, and the evaluation math. File IO, the
//! dataset pipeline and the command line live in the `emogen` crate.
//!
//! Enable the `parallel` feature (on by default) to let matrix products use
//! the rayon thread pool. Results do not depend on the thread count.
#![cfg_attr(not(feature = "std"), no_std)]
#![deny(unsafe_code)]

extern crate alloc;

pub mod autograd;
pub mod evaluate;
pub mod generate;
pub mod gradcheck;
pub mod midi;
pub mod model;
pub mod optim;
pub mod stats;
pub mod tensor;
pub mod tokenizer;
pub mod training;

pub use midi::{Instrument, NoteEvent, NoteKind};
pub use tokenizer::{ConditionPair, TokenId, Vocab};

/// Deterministic generator used everywhere randomness is needed.
pub type Rng = rand_chacha::ChaCha8Rng;

/// Builds the crate-wide generator from a seed.
pub fn seeded_rng(seed: u64) -> Rng {
    use rand::SeedableRng;
    Rng::seed_from_u64(seed)
}
