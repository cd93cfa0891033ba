//! Autoregressive teacher and non-autoregressive student translation models,
//! with the student trained on the teacher's hidden-state and attention hints.
//!
//! The pipeline runs in four stages:
//!
//! 1. train a [`Teacher`] on a parallel corpus ([`train::train_teacher`]);
//! 2. replace the targets by the teacher's greedy decodes
//!    ([`train::distill_corpus`]);
//! 3. train a [`Student`] on the distilled corpus with the hint losses
//!    ([`train::train_student`]);
//! 4. translate with length candidates and teacher rescoring
//!    ([`inference::translate`]) and evaluate ([`eval`]).
//!
//! ```
//! use nartlab::inference::candidate_lengths;
//!
//! assert_eq!(candidate_lengths(5, 2, 4), (3..=11).collect::<Vec<_>>());
//! ```

pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod inference;
pub mod losses;
pub mod nn;
pub mod rng;
pub mod student;
pub mod teacher;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use student::Student;
pub use teacher::Teacher;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/quickstart.md")]
    mod quickstart {}
    #[doc = include_str!("../../../book/src/tensors.md")]
    mod tensors {}
    #[doc = include_str!("../../../book/src/models.md")]
    mod models {}
    #[doc = include_str!("../../../book/src/hints.md")]
    mod hints {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/inference.md")]
    mod inference {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/configuration.md")]
    mod configuration {}
    #[doc = include_str!("../../../book/src/acceptance.md")]
    mod acceptance {}
}
