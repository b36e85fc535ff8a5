//! Link prediction with hypernetwork-generated 1D convolution filters.
//!
//! A relation embedding is mapped by a small hypernetwork to a bank of 1D
//! filters. Those filters are convolved over the subject entity embedding,
//! and the result is projected back to entity space and scored against
//! every entity with a dot product (1-N scoring).
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`]: dense kernels with hand-written backward passes.
//! - [`data`]: triple parsing, vocabularies, reciprocal relations and the
//!   filtered-evaluation index.
//! - [`model`]: filter generation, the scoring pipeline, the explicit
//!   sparse-matrix view of the convolution, DistMult and parameter counts.
//! - [`train`]: label smoothing, BCE, Adam and the training loop.
//! - [`eval`]: filtered MR / MRR / hits@k.
//! - [`gradcheck`]: finite-difference checks of the analytic gradients.
//! - [`toy`]: small synthetic graphs used by tests and examples.
//!
//! ```
//! use hyperkg::model::{self, ModelConfig};
//! use hyperkg::tensor::Mode;
//! use rand::SeedableRng;
//!
//! let config = ModelConfig::plain(16, 8, 3, 4);
//! let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
//! let params = model::init_params(&config, 10, 2, &mut rng).unwrap();
//! let scores = model::score_1n(3, 1, &params, &config, Mode::Eval, None).unwrap();
//! assert_eq!(scores.len(), 10);
//! ```

pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod model;
pub mod tensor;
pub mod toy;
pub mod train;

pub use error::{Error, Result};
