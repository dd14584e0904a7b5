//! Desk-scale laboratory for encoder-based concept inversion in a latent
//! diffusion model.
//!
//! The crate trains, end to end on synthetic imagery, the full chain of a
//! modern text-to-image stack at toy dimensions: a latent autoencoder, a
//! cross-attention denoiser, contrastively pretrained image/text encoders,
//! and on top of them two learned inversion mappings that turn a single
//! concept image into word embeddings (a global mapping) and into
//! patch-level context injected through a fused, reweighted cross-attention
//! branch (a local mapping). Everything runs on one CPU core with
//! byte-reproducible results.
//!
//! Start with the `examples/` directory: each example exercises one
//! capability (data generation, backbone pretraining, the two mapping
//! stages, encoding, generation, evaluation). The `elite-lab` binary
//! exposes the same steps as subcommands.

pub mod cli;
pub mod data;
pub mod diffcore;
pub mod error;
pub mod eval;
pub mod globalmap;
pub mod imageenc;
pub mod ldm;
pub mod localmap;
pub mod model;
pub mod nn;
pub mod pngio;
pub mod pretrain;
pub mod textenc;

pub use diffcore::{Gradients, OptimizerState, ParamRef, ParamSet, Scalar, Tape, Tensor, Var};
pub use error::{Error, Result};
