//! Turn a prompt context into permanent parameter updates of a language model.
//!
//! The pipeline has three phases plus the machinery around them:
//!
//! 1. **Elicitation** ([`elicit`]) — prompt the context-conditioned model
//!    (the *teacher*) to generate queries, grounded responses, and open-ended
//!    continuations, forming a transfer set.
//! 2. **Selection** ([`select`]) — rank transfer entries by the gap between
//!    teacher-conditional and student-unconditional sequence log-probability
//!    and keep the top-k.
//! 3. **Consolidation** ([`consolidate`]) — train a low-rank adapter on the
//!    context-free *student* so its next-token distributions match the
//!    teacher's context-conditioned ones.
//!
//! [`stream`] repeats the transformation chunk by chunk for contexts longer
//! than the window, [`eval`] measures how much of the full-context behavior
//! the consolidated model recovers, and [`backend`] provides the reference
//! tiny transformer everything runs on at desk scale.

pub mod backend;
pub mod consolidate;
pub mod corpus;
pub mod elicit;
pub mod error;
pub mod eval;
pub mod manifest;
pub mod rng;
pub mod select;
pub mod stream;

pub use backend::{AdapterState, LmBackend, TinyTransformer, TokenSequence};
pub use error::{Error, Result};
