//! Dual-vision 3D question answering at desk scale.
//!
//! The pipeline back-projects multi-view image features onto a point
//! cloud ([`geometry`]), weights the views by their agreement with the
//! question ([`tgmf`]), gates image and point features per point and
//! channel ([`advp`]), reasons over sparse candidates with dense visual
//! context and the question ([`mcgr`]) and answers through the
//! classification heads in [`heads`]. Everything runs on a small
//! reverse-mode tensor engine ([`autograd`]) so the whole stack can be
//! trained and gradient-checked on synthetic scenes ([`scenegen`]).

pub mod advp;
pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod geometry;
pub mod gradcheck;
pub mod gradsuite;
pub mod heads;
pub mod mcgr;
pub mod model;
pub mod nn;
pub mod optim;
pub mod runner;
pub mod scenegen;
pub mod tensor;
pub mod tgmf;

pub use autograd::{Graph, Var};
pub use checkpoint::Checkpoint;
pub use config::RunConfig;
pub use error::{Error, Result};
pub use nn::{ParamSet, ParamVars};
pub use tensor::Tensor;
