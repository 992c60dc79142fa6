//! Desk-scale differentiable architecture search.
//!
//! The crate searches tiny two-cell networks over toy operation spaces on a
//! 2-D spiral classification task, small enough that the whole architecture
//! space can be enumerated and retrained exhaustively. On top of the plain
//! bi-level search it tracks the curvature of the validation loss in the
//! architecture parameters and implements the robustified variants driven by
//! that signal: early stopping, adaptive regularization, and multi-run
//! selection, plus a shared-weights random-search baseline.

pub mod autodiff;
pub mod bilevel;
pub mod curvature;
pub mod data;
pub mod error;
pub mod harness;
pub mod linalg;
pub mod rng;
pub mod robustify;
pub mod space;

pub use error::{Error, Result};
