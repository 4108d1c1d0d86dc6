//! End-to-end preparation shared by the command line and the experiments:
//! split, augment, build the library and train the models.

use serde::{Deserialize, Serialize};

use crate::augment::{build_library, transpose_corpus, AugmentConfig, AugmentMode, PitchRange, UnitLibrary};
use crate::autoencoder::{train_autoencoder, AutoencoderModel, AutoencoderShape};
use crate::corpus::{split_corpus, Corpus};
use crate::dssm::{make_training_pairs, train_dssm_width, DssmModel, DSSM_WIDTH};
use crate::error::Result;
use crate::features::FeatureVocabulary;
use crate::lm::{train_lm, LmModel, LmShape, NoteVocabulary};
use crate::nn::TrainConfig;
use crate::rng;
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub unit_length: usize,
    pub train_fraction: f64,
    pub shifts: Vec<i32>,
    pub ae_shape: AutoencoderShape,
    pub dssm_width: usize,
    pub lm_shape: LmShape,
    pub ae_train: TrainConfig,
    pub dssm_train: TrainConfig,
    pub lm_train: TrainConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            unit_length: 4,
            train_fraction: 0.6,
            shifts: AugmentConfig::default().transpose_shifts,
            ae_shape: AutoencoderShape::default(),
            dssm_width: DSSM_WIDTH,
            lm_shape: LmShape::default(),
            ae_train: TrainConfig::default(),
            dssm_train: TrainConfig::default(),
            lm_train: TrainConfig::default(),
        }
    }
}

impl PipelineConfig {
    /// Gives every training run its own seed derived from `seed`.
    pub fn seeded(mut self, seed: u64) -> Self {
        self.ae_train.seed = rng::derive_seed(seed, "train-ae");
        self.dssm_train.seed = rng::derive_seed(seed, "train-dssm");
        self.lm_train.seed = rng::derive_seed(seed, "train-lm");
        self
    }

    pub fn augment(&self, mode: AugmentMode) -> AugmentConfig {
        AugmentConfig {
            mode,
            ..AugmentConfig::transpose_only(self.unit_length, self.shifts.clone())
        }
    }
}

/// The train side transposed by every configured shift.
pub fn transposed(train: &Corpus, shifts: &[i32]) -> Result<Corpus> {
    Corpus::new(transpose_corpus(train, shifts, PitchRange::default()))
}

pub fn train_sequence_models<T: Scalar>(
    train: &Corpus,
    lib: &UnitLibrary,
    cfg: &PipelineConfig,
) -> Result<(DssmModel<T>, LmModel<T>)> {
    let aug = transposed(train, &cfg.shifts)?;
    Ok((train_relevance(&aug, lib, cfg)?, train_language(&aug, cfg)?))
}

pub fn train_relevance<T: Scalar>(aug: &Corpus, lib: &UnitLibrary, cfg: &PipelineConfig) -> Result<DssmModel<T>> {
    let pairs = make_training_pairs(aug, cfg.unit_length)?;
    let vocab = FeatureVocabulary::from_units(lib.units().chain(pairs.iter().flat_map(|(a, b)| [a, b])))?;
    train_dssm_width(&pairs, &vocab, cfg.dssm_width, &cfg.dssm_train)
}

pub fn train_language<T: Scalar>(aug: &Corpus, cfg: &PipelineConfig) -> Result<LmModel<T>> {
    let vocab = NoteVocabulary::from_pieces(&aug.pieces);
    train_lm(&aug.pieces, &vocab, &cfg.lm_shape, &cfg.lm_train)
}

pub fn train_target_model<T: Scalar>(lib: &UnitLibrary, cfg: &PipelineConfig) -> Result<AutoencoderModel<T>> {
    let vocab = FeatureVocabulary::from_units(lib.units())?;
    train_autoencoder(lib, &vocab, &cfg.ae_shape, &cfg.ae_train)
}

/// Everything needed for next-unit evaluation and unit-level generation.
pub struct Prepared<T> {
    pub train: Corpus,
    pub test: Corpus,
    pub library: UnitLibrary,
    pub dssm: DssmModel<T>,
    pub lm: LmModel<T>,
}

/// Splits by `seed`, builds a transposition-only library from the train side
/// and trains the relevance and language models on it.
pub fn prepare<T: Scalar>(corpus: &Corpus, cfg: &PipelineConfig, seed: u64) -> Result<Prepared<T>> {
    let (train, test) = split_corpus(corpus, cfg.train_fraction, seed)?;
    let library = build_library(&train, &cfg.augment(AugmentMode::TransposeOnly))?;
    let (dssm, lm) = train_sequence_models(&train, &library, cfg)?;
    Ok(Prepared {
        train,
        test,
        library,
        dssm,
        lm,
    })
}
