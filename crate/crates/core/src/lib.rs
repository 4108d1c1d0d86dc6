//! Unit selection for monophonic symbolic melodies.
//!
//! Music is cut into units of one, two or four measures. An autoencoder
//! embeds units so a piece can be rebuilt from library units by nearest
//! neighbour search, a relevance model scores which unit may follow which,
//! and a note-level LSTM prices each join. Generation ranks the library by
//! relevance, re-ranks the best few by join cost and takes the best
//! combined rank.
//!
//! Networks are generic over [`Scalar`] (`f32` or `f64`); the aliases below
//! fix the width.

pub mod archive;
pub mod augment;
pub mod autoencoder;
pub mod cli;
pub mod corpus;
pub mod dssm;
pub mod error;
pub mod eval;
pub mod features;
pub mod index;
pub mod lm;
pub mod music;
pub mod nn;
pub mod pipeline;
pub mod rng;
pub mod scalar;
pub mod select;
pub mod toy;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Autoencoder = autoencoder::AutoencoderModel<f64>;
pub type Dssm = dssm::DssmModel<f64>;
pub type LanguageModel = lm::LmModel<f64>;
pub type Autoencoder32 = autoencoder::AutoencoderModel<f32>;
pub type Dssm32 = dssm::DssmModel<f32>;
pub type LanguageModel32 = lm::LmModel<f32>;
