//! Unit autoencoder: an hourglass network trained so that each unit's
//! reconstructed feature vector is closer (by cosine) to its own input than
//! the reconstructions of randomly chosen other units are. The bottleneck
//! activations are the embeddings used for target-cost unit selection.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::archive::{ModelArchive, ModelKind, VocabSnapshot};
use crate::augment::UnitLibrary;
use crate::error::{Error, Result};
use crate::eval::{rank_in_shuffled_pool, RankSummary};
use crate::features::{FeatureVector, FeatureVocabulary};
use crate::index::{EmbeddedLibrary, Embedder, Scored};
use crate::music::{Piece, Unit};
use crate::nn::{
    any_zero_norm, batch_relevance_backward, batches, grouped_grads, softmax_relevance, Params, Activation, Dense, Optimizer, Stack, TrainConfig,
};
use crate::rng;
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AutoencoderShape {
    pub hidden: usize,
    pub embedding: usize,
    /// Negative slope of the leaky rectifier used on every layer.
    pub alpha: f64,
}

impl Default for AutoencoderShape {
    fn default() -> Self {
        AutoencoderShape {
            hidden: 512,
            embedding: 128,
            alpha: 0.001,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AutoencoderModel<T> {
    /// Encoder layers 0..2, decoder layers 2..4.
    pub net: Stack<T>,
    pub vocab: FeatureVocabulary,
    vocab_hash: String,
    /// Evaluation loss before training and after each epoch.
    pub loss_history: Vec<f64>,
}

const ENCODER_DEPTH: usize = 2;

impl<T: Scalar> AutoencoderModel<T> {
    pub fn init(vocab: FeatureVocabulary, shape: &AutoencoderShape, seed: u64) -> Self {
        let mut r = rng::stream(seed, "ae-init");
        let act = Activation::LeakyRelu(shape.alpha);
        let d = vocab.dim();
        let net = Stack::new(vec![
            Dense::new(d, shape.hidden, act, &mut r),
            Dense::new(shape.hidden, shape.embedding, act, &mut r),
            Dense::new(shape.embedding, shape.hidden, act, &mut r),
            Dense::new(shape.hidden, d, act, &mut r),
        ]);
        let vocab_hash = vocab.hash();
        AutoencoderModel {
            net,
            vocab,
            vocab_hash,
            loss_history: Vec::new(),
        }
    }

    pub fn embedding_dim(&self) -> usize {
        self.net.layers[ENCODER_DEPTH - 1].outputs
    }

    pub fn encode_features(&self, f: &FeatureVector) -> Result<Vec<T>> {
        self.net.infer_to(&f.to_dense(), ENCODER_DEPTH)
    }

    pub fn encode(&self, u: &Unit) -> Result<Vec<T>> {
        self.encode_features(&self.vocab.extract(u))
    }

    /// Encodes after checking that `vocab` is the one the model was trained with.
    pub fn encode_with(&self, u: &Unit, vocab: &FeatureVocabulary) -> Result<Vec<T>> {
        let found = vocab.hash();
        if found != self.vocab_hash {
            return Err(Error::VocabMismatch {
                expected: self.vocab_hash.clone(),
                found,
            });
        }
        self.encode(u)
    }

    pub fn reconstruct_features(&self, u: &Unit) -> Result<Vec<T>> {
        self.net.infer(&self.vocab.extract(u).to_dense())
    }

    pub fn to_archive(&self) -> ModelArchive {
        let dims = std::iter::once(self.net.input_dim())
            .chain(self.net.layers.iter().map(|l| l.outputs))
            .collect();
        let mut a = ModelArchive::new::<T>(ModelKind::Autoencoder, dims, VocabSnapshot::Features(self.vocab.clone()));
        for (k, l) in self.net.layers.iter().enumerate() {
            a.push_dense(&format!("layer{k}"), l);
        }
        a.set("loss_history", &self.loss_history);
        a
    }

    pub fn from_archive(a: &ModelArchive) -> Result<Self> {
        a.validate()?;
        a.expect_kind(ModelKind::Autoencoder)?;
        let VocabSnapshot::Features(vocab) = &a.vocabulary else {
            return Err(Error::Parse("autoencoder archive holds a note vocabulary".into()));
        };
        let layers = (0..4).map(|k| a.read_dense(&format!("layer{k}"))).collect::<Result<Vec<_>>>()?;
        for w in layers.windows(2) {
            if w[0].outputs != w[1].inputs {
                return Err(Error::Shape("autoencoder layer chain".into()));
            }
        }
        if layers[0].inputs != vocab.dim() || layers[3].outputs != vocab.dim() {
            return Err(Error::Shape("autoencoder width differs from its vocabulary".into()));
        }
        Ok(AutoencoderModel {
            net: Stack::new(layers),
            vocab: vocab.clone(),
            vocab_hash: a.vocab_hash.clone(),
            loss_history: a.get("loss_history")?,
        })
    }
}

impl<T: Scalar> Embedder<T> for AutoencoderModel<T> {
    fn embed(&self, u: &Unit) -> Result<Vec<T>> {
        self.encode(u)
    }

    fn vocab_hash(&self) -> String {
        self.vocab_hash.clone()
    }
}

/// Mean relevance loss over the whole library with dropout off, each unit
/// scored against the reconstructions of a fixed set of other units.
fn evaluation_loss<T: Scalar>(net: &Stack<T>, inputs: &[Vec<T>], negatives: &[Vec<usize>]) -> Result<f64> {
    let recon = inputs.par_iter().map(|x| net.infer(x)).collect::<Result<Vec<_>>>()?;
    let losses = (0..inputs.len())
        .into_par_iter()
        .map(|i| {
            let cands: Vec<&[T]> = std::iter::once(i)
                .chain(negatives[i].iter().copied())
                .map(|k| recon[k].as_slice())
                .collect();
            if any_zero_norm(&cands) || any_zero_norm(&[&inputs[i]]) {
                return Ok(None);
            }
            softmax_relevance(&inputs[i], &cands, 0).map(|(_, l)| Some(l.as_f64()))
        })
        .collect::<Result<Vec<Option<f64>>>>()?;
    let live: Vec<f64> = losses.into_iter().flatten().collect();
    Ok(live.iter().sum::<f64>() / live.len().max(1) as f64)
}

/// Trains on every library unit. Per example, the negatives are the
/// reconstructions of `cfg.negatives` other units drawn at random from the
/// same shuffled mini-batch; the batch loss is the sum of per-example losses.
pub fn train_autoencoder<T: Scalar>(
    lib: &UnitLibrary,
    vocab: &FeatureVocabulary,
    shape: &AutoencoderShape,
    cfg: &TrainConfig,
) -> Result<AutoencoderModel<T>> {
    cfg.validate()?;
    let n = lib.len();
    if n < cfg.negatives + 1 {
        return Err(Error::TooSmall(format!(
            "library of {n} units cannot supply {} negatives",
            cfg.negatives
        )));
    }
    let mut model = AutoencoderModel::<T>::init(vocab.clone(), shape, cfg.seed);
    let units: Vec<&Unit> = lib.units().collect();
    let inputs: Vec<Vec<T>> = units.par_iter().map(|u| vocab.extract(u).to_dense()).collect();

    let mut eval_rng = rng::stream(cfg.seed, "ae-eval");
    let eval_negs: Vec<Vec<usize>> = (0..n)
        .map(|i| rng::sample_excluding(&mut eval_rng, n, i, cfg.negatives))
        .collect();
    model.loss_history.push(evaluation_loss(&model.net, &inputs, &eval_negs)?);

    let mut opt = Optimizer::new(cfg);
    let mut shuffle_rng = rng::stream(cfg.seed, "ae-shuffle");
    let mut neg_rng = rng::stream(cfg.seed, "ae-negatives");
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut shuffle_rng);
        for batch in batches(&order, cfg.batch_size, cfg.negatives + 1) {
            let net = &model.net;
            let caches = batch
                .par_iter()
                .map(|&i| {
                    let mut r = rng::indexed(cfg.seed, "ae-dropout", epoch as u64, i as u64);
                    net.forward(&inputs[i], Some((cfg.dropout_keep, &mut r)))
                })
                .collect::<Result<Vec<_>>>()?;
            let negs: Vec<Vec<usize>> = (0..batch.len())
                .map(|b| rng::sample_excluding(&mut neg_rng, batch.len(), b, cfg.negatives))
                .collect();
            let qs: Vec<Vec<T>> = batch.iter().map(|&i| inputs[i].clone()).collect();
            let cs: Vec<Vec<T>> = caches.iter().map(|c| c.output.clone()).collect();
            let (_, _, dcs) = batch_relevance_backward(&qs, &cs, &negs)?;
            let mut grads = grouped_grads(net, batch.len(), |b, g| net.backward(&caches[b], &dcs[b], g))?;
            opt.step(&mut model.net, &mut grads)?;
        }
        model.loss_history.push(evaluation_loss(&model.net, &inputs, &eval_negs)?);
    }
    Ok(model)
}

/// Summed reconstruction loss for a fixed choice of negatives, with dropout
/// off: each input scored against its own reconstruction and those of the
/// listed other inputs.
pub fn reconstruction_loss<T: Scalar>(net: &Stack<T>, inputs: &[Vec<T>], negatives: &[Vec<usize>]) -> Result<T> {
    let recon = inputs.iter().map(|x| net.infer(x)).collect::<Result<Vec<_>>>()?;
    Ok(batch_relevance_backward(inputs, &recon, negatives)?.0)
}

/// Gradient of `reconstruction_loss` with respect to the network parameters.
pub fn reconstruction_loss_grads<T: Scalar>(net: &Stack<T>, inputs: &[Vec<T>], negatives: &[Vec<usize>]) -> Result<Stack<T>> {
    let caches = inputs.iter().map(|x| net.forward(x, None)).collect::<Result<Vec<_>>>()?;
    let cs: Vec<Vec<T>> = caches.iter().map(|c| c.output.clone()).collect();
    let (_, _, dcs) = batch_relevance_backward(inputs, &cs, negatives)?;
    let mut g = net.zeros_like();
    for (c, d) in caches.iter().zip(&dcs) {
        net.backward(c, d, &mut g)?;
    }
    Ok(g)
}

pub fn select_nearest<T: Scalar>(e: &[T], lib: &EmbeddedLibrary<'_, T>, k: usize) -> Result<Vec<Scored<T>>> {
    lib.nearest(e, k)
}

/// Replaces every unit of `p` by its nearest library unit (target cost only).
pub fn reconstruct<T: Scalar>(p: &Piece, lib: &EmbeddedLibrary<'_, T>, model: &AutoencoderModel<T>) -> Result<Piece> {
    lib.check_model(model)?;
    let l = lib.library.unit_length;
    if p.measures.len() % l != 0 {
        return Err(Error::Invalid(format!(
            "piece {} has {} measures, not a multiple of the unit length {l}",
            p.id,
            p.measures.len()
        )));
    }
    if p.meter() != Some(lib.library.meter) {
        return Err(Error::Meter(format!("piece {} does not use the library meter", p.id)));
    }
    let picks = p
        .units(l)
        .iter()
        .map(|u| {
            let e = model.encode(u)?;
            Ok(lib.nearest(&e, 1)?[0].index)
        })
        .collect::<Result<Vec<usize>>>()?;
    Ok(Piece::from_units(
        format!("{}-recon", p.id),
        picks.iter().map(|&i| lib.library.unit(i)),
    ))
}

/// Selects the library unit nearest to `(1 - alpha) * enc(a) + alpha * enc(b)`.
pub fn interpolate<T: Scalar>(
    a: &Unit,
    b: &Unit,
    alpha: f64,
    lib: &EmbeddedLibrary<'_, T>,
    model: &AutoencoderModel<T>,
) -> Result<Scored<T>> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Invalid(format!("alpha {alpha} outside [0, 1]")));
    }
    lib.check_model(model)?;
    let (ea, eb) = (model.encode(a)?, model.encode(b)?);
    let w = T::of(alpha);
    let blend: Vec<T> = ea
        .iter()
        .zip(&eb)
        .map(|(&x, &y)| (T::one() - w) * x + w * y)
        .collect();
    let top = lib.nearest(&blend, 1).map_err(|e| match e {
        Error::ZeroNorm => Error::Invalid("interpolated embedding is the zero vector".into()),
        other => other,
    })?;
    Ok(top[0])
}

/// Ranks each probe's own library entry among itself and 49 random other
/// units by cosine similarity to the probe's embedding.
pub fn rank_at_50<T: Scalar>(
    model: &AutoencoderModel<T>,
    lib: &EmbeddedLibrary<'_, T>,
    probes: &[Unit],
    seed: u64,
) -> Result<RankSummary> {
    lib.check_model(model)?;
    let queries = probes
        .iter()
        .map(|u| {
            let truth = lib
                .library
                .position(u)
                .ok_or_else(|| Error::Invalid("probe unit is not in the library".into()))?;
            Ok((model.encode(u)?, truth))
        })
        .collect::<Result<Vec<_>>>()?;
    rank_embeddings(lib, &queries, 50, seed)
}

/// Rank@k over precomputed `(query embedding, truth index)` probes.
pub fn rank_embeddings<T: Scalar>(
    lib: &EmbeddedLibrary<'_, T>,
    queries: &[(Vec<T>, usize)],
    pool: usize,
    seed: u64,
) -> Result<RankSummary> {
    if lib.len() < pool {
        return Err(Error::TooSmall(format!("library of {} units, need {pool}", lib.len())));
    }
    let ranks = queries
        .par_iter()
        .enumerate()
        .map(|(p, (q, truth))| {
            let mut r = rng::indexed(seed, "rank50", p as u64, 0);
            let distractors = rng::sample_excluding(&mut r, lib.len(), *truth, pool - 1);
            let ids: Vec<usize> = std::iter::once(*truth).chain(distractors).collect();
            let scores = ids
                .iter()
                .map(|&i| lib.similarity_to(q, i).map(|s| s.as_f64()))
                .collect::<Result<Vec<f64>>>()?;
            Ok(rank_in_shuffled_pool(&scores, 0, &mut r))
        })
        .collect::<Result<Vec<usize>>>()?;
    Ok(RankSummary::from_ranks(&ranks, seed))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CollisionReport {
    pub units: usize,
    /// Units whose embedding matches a distinct unit's within the tolerance.
    pub colliding_units: usize,
    pub per_100k: f64,
    /// Cosine similarity at or above `1 - tolerance` counts as a collision.
    pub tolerance: f64,
}

pub const COLLISION_TOLERANCE: f64 = 1e-9;

pub fn collision_rate<T: Scalar>(lib: &EmbeddedLibrary<'_, T>) -> CollisionReport {
    let n = lib.len();
    let normalized: Vec<Vec<f64>> = (0..n)
        .map(|i| crate::index::normalize(&lib.embedding(i).iter().map(|v| v.as_f64()).collect::<Vec<_>>()))
        .collect();
    let threshold = 1.0 - COLLISION_TOLERANCE;
    let colliding = (0..n)
        .into_par_iter()
        .filter(|&i| {
            (0..n).any(|j| j != i && crate::scalar::dot(&normalized[i], &normalized[j]) >= threshold)
        })
        .count();
    CollisionReport {
        units: n,
        colliding_units: colliding,
        per_100k: if n == 0 { 0.0 } else { colliding as f64 * 100_000.0 / n as f64 },
        tolerance: COLLISION_TOLERANCE,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::augment::{build_library, AugmentConfig};
    use crate::corpus::Corpus;
    use crate::music::validate_piece;
    use crate::nn::grad_check_extrapolated;
    use crate::toy;
    use rand::Rng;

    fn small_setup() -> (Corpus, UnitLibrary) {
        let c = toy::corpus(4, 8, 3);
        let lib = build_library(&c, &AugmentConfig::transpose_only(1, vec![0])).unwrap();
        (c, lib)
    }

    fn tiny_shape() -> AutoencoderShape {
        AutoencoderShape {
            hidden: 24,
            embedding: 12,
            alpha: 0.001,
        }
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let mut r = rng::stream(4, "t");
        let act = Activation::LEAKY_DEFAULT;
        let net = Stack::<f64>::new(vec![
            Dense::new(10, 8, act, &mut r),
            Dense::new(8, 5, act, &mut r),
            Dense::new(5, 8, act, &mut r),
            Dense::new(8, 10, act, &mut r),
        ]);
        let inputs: Vec<Vec<f64>> = (0..6).map(|_| (0..10).map(|_| r.gen_range(0.0..3.0f64).floor()).collect()).collect();
        let negs: Vec<Vec<usize>> = (0..6).map(|i| rng::sample_excluding(&mut r, 6, i, 3)).collect();
        let g = reconstruction_loss_grads(&net, &inputs, &negs).unwrap();
        let rep = grad_check_extrapolated(
            &net,
            &g,
            |n: &Stack<f64>| reconstruction_loss(n, &inputs, &negs).unwrap(),
            |n: &Stack<f64>| inputs.iter().flat_map(|x| n.kink_pattern(x).unwrap()).collect(),
            1e-2,
            400,
            1,
        );
        assert!(rep.max_error < 1e-4 && rep.nondifferentiable == 0, "{rep:?}");
    }

    #[test]
    fn zero_learning_rate_keeps_loss_flat() {
        let (_, lib) = small_setup();
        let vocab = FeatureVocabulary::from_units(lib.units()).unwrap();
        let cfg = TrainConfig {
            learning_rate: 0.0,
            epochs: 3,
            ..Default::default()
        };
        let m = train_autoencoder::<f64>(&lib, &vocab, &tiny_shape(), &cfg).unwrap();
        assert_eq!(m.loss_history.len(), 4);
        assert!(m.loss_history.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn same_seed_same_weights() {
        let (_, lib) = small_setup();
        let vocab = FeatureVocabulary::from_units(lib.units()).unwrap();
        let cfg = TrainConfig {
            epochs: 2,
            ..Default::default()
        };
        let a = train_autoencoder::<f64>(&lib, &vocab, &tiny_shape(), &cfg).unwrap();
        let b = train_autoencoder::<f64>(&lib, &vocab, &tiny_shape(), &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn too_small_library() {
        let lib = UnitLibrary::from_units(1, crate::music::Duration::WHOLE, small_setup().1.units().take(3).cloned());
        let vocab = FeatureVocabulary::from_units(lib.units()).unwrap();
        assert!(matches!(
            train_autoencoder::<f64>(&lib, &vocab, &tiny_shape(), &TrainConfig::default()),
            Err(Error::TooSmall(_))
        ));
    }

    #[test]
    fn encode_is_deterministic_and_sized() {
        let (_, lib) = small_setup();
        let vocab = FeatureVocabulary::from_units(lib.units()).unwrap();
        let m = AutoencoderModel::<f64>::init(vocab.clone(), &AutoencoderShape::default(), 1);
        let u = lib.unit(0);
        let e = m.encode(u).unwrap();
        assert_eq!(e.len(), 128);
        assert!(e.iter().all(|v| v.is_finite()));
        assert_eq!(e, m.encode(&u.clone()).unwrap());
        assert_eq!(e, m.encode_with(u, &vocab).unwrap());
        let other = FeatureVocabulary::from_units([lib.unit(1)]).unwrap();
        assert!(matches!(m.encode_with(u, &other), Err(Error::VocabMismatch { .. })));
    }

    #[test]
    fn reconstruct_reproduces_library_pieces() {
        let (c, lib) = small_setup();
        let vocab = FeatureVocabulary::from_units(lib.units()).unwrap();
        let m = AutoencoderModel::<f64>::init(vocab, &tiny_shape(), 2);
        let emb = EmbeddedLibrary::build(&lib, &m).unwrap();
        let p = &c.pieces[0];
        let r = reconstruct(p, &emb, &m).unwrap();
        assert!(validate_piece(&r).is_empty());
        assert_eq!(r.measures.len(), p.measures.len());
        let collisions = collision_rate(&emb);
        if collisions.colliding_units == 0 {
            assert_eq!(r.measures, p.measures);
        }
    }

    #[test]
    fn reconstruct_rejects_ragged_length() {
        let c = toy::corpus(2, 7, 5);
        let lib = build_library(&c, &AugmentConfig::transpose_only(4, vec![0])).unwrap();
        let vocab = FeatureVocabulary::from_units(lib.units()).unwrap();
        let m = AutoencoderModel::<f64>::init(vocab, &tiny_shape(), 2);
        let emb = EmbeddedLibrary::build(&lib, &m).unwrap();
        assert!(matches!(reconstruct(&c.pieces[0], &emb, &m), Err(Error::Invalid(_))));
    }

    #[test]
    fn interpolation_endpoints() {
        let (_, lib) = small_setup();
        let vocab = FeatureVocabulary::from_units(lib.units()).unwrap();
        let m = AutoencoderModel::<f64>::init(vocab, &tiny_shape(), 4);
        let emb = EmbeddedLibrary::build(&lib, &m).unwrap();
        let (a, b) = (lib.unit(3), lib.unit(10));
        let at0 = interpolate(a, b, 0.0, &emb, &m).unwrap();
        let at1 = interpolate(a, b, 1.0, &emb, &m).unwrap();
        assert_eq!(at0.index, emb.nearest(&m.encode(a).unwrap(), 1).unwrap()[0].index);
        assert_eq!(at1.index, emb.nearest(&m.encode(b).unwrap(), 1).unwrap()[0].index);
        assert!(interpolate(a, b, 1.5, &emb, &m).is_err());
    }

    #[test]
    fn duplicate_embeddings_collide() {
        let (_, lib) = small_setup();
        let mut embs: Vec<Vec<f64>> = (0..lib.len()).map(|i| vec![i as f64 + 1.0, 1.0, (i * i) as f64]).collect();
        embs[1] = embs[0].clone();
        let emb = EmbeddedLibrary::from_embeddings(&lib, embs, "h".into());
        let r = collision_rate(&emb);
        assert!(r.colliding_units >= 2);
        assert!((r.per_100k - r.colliding_units as f64 * 1e5 / lib.len() as f64).abs() < 1e-9);
    }

    #[test]
    fn archive_round_trip_preserves_outputs() {
        let (_, lib) = small_setup();
        let vocab = FeatureVocabulary::from_units(lib.units()).unwrap();
        let cfg = TrainConfig {
            epochs: 1,
            ..Default::default()
        };
        let m = train_autoencoder::<f64>(&lib, &vocab, &tiny_shape(), &cfg).unwrap();
        let a = m.to_archive();
        let bytes = a.to_bytes();
        let back = AutoencoderModel::<f64>::from_archive(&ModelArchive::from_bytes(&bytes).unwrap()).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.to_archive().to_bytes(), bytes);
        for u in lib.units() {
            assert_eq!(m.encode(u).unwrap(), back.encode(u).unwrap());
        }
        let wrong = ModelArchive { kind: ModelKind::Dssm, ..a };
        assert!(AutoencoderModel::<f64>::from_archive(&wrong).is_err());
    }
}
