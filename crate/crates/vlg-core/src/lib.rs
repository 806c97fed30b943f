//! Syntax-guided video-language grounding at desk scale.
//!
//! The pipeline decomposes a constituency-parsed query into a chain of
//! (noun phrase, verb phrase) sub-prompts, then refines a grid of video
//! tokens one sub-prompt at a time: a spatial attention pass per frame
//! guided by the noun phrase, a temporal attention pass per object slot
//! guided by the verb phrase, and a learned channel-space residual that
//! carries state across steps. Grounding heads score temporal segments
//! against a sentence embedding or decode per-pixel masks; metrics and a
//! synthetic data generator close the loop so the whole system trains and
//! evaluates end to end on a single machine.
//!
//! Everything differentiable runs on a small `f64` Wengert tape
//! ([`tensor`]); runs are bitwise deterministic for a fixed seed.

pub mod bench;
pub mod embed;
pub mod heads;
pub mod metrics;
pub mod parallel;
pub mod planner;
pub mod refiner;
pub mod seeding;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod treebank;

pub use tensor::{Tape, Tensor};
