//! Semantic relevance between units. One tower embeds both members of a
//! consecutive pair; training raises the cosine similarity of each unit's
//! embedding to that of its true successor relative to other successors.

use rayon::prelude::*;

use crate::archive::{ModelArchive, ModelKind, VocabSnapshot};
use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::features::FeatureVocabulary;
use crate::index::Embedder;
use crate::music::Unit;
use crate::nn::{
    any_zero_norm, batch_relevance_backward, batches, cosine_sim, grouped_grads, softmax_relevance, Activation, Dense, Optimizer, Params,
    Stack, StackCache, TrainConfig,
};
use crate::rng;
use crate::scalar::Scalar;

pub const DSSM_WIDTH: usize = 128;

#[derive(Clone, Debug, PartialEq)]
pub struct DssmModel<T> {
    pub tower: Stack<T>,
    pub vocab: FeatureVocabulary,
    vocab_hash: String,
    pub loss_history: Vec<f64>,
}

/// Every adjacent pair of non-overlapping units within each piece.
/// Pieces too short to hold two units contribute nothing; it is an error
/// only if no piece yields a pair.
pub fn make_training_pairs(c: &Corpus, unit_length: usize) -> Result<Vec<(Unit, Unit)>> {
    if unit_length == 0 {
        return Err(Error::Invalid("unit length must be positive".into()));
    }
    let pairs: Vec<(Unit, Unit)> = c
        .pieces
        .iter()
        .flat_map(|p| {
            let units = p.units(unit_length);
            units
                .windows(2)
                .map(|w| (w[0].clone(), w[1].clone()))
                .collect::<Vec<_>>()
        })
        .collect();
    if pairs.is_empty() {
        return Err(Error::TooSmall(format!(
            "no piece holds two consecutive units of {unit_length} measures"
        )));
    }
    Ok(pairs)
}

impl<T: Scalar> DssmModel<T> {
    pub fn init(vocab: FeatureVocabulary, width: usize, seed: u64) -> Self {
        let mut r = rng::stream(seed, "dssm-init");
        let tower = Stack::new(vec![
            Dense::new(vocab.dim(), width, Activation::Relu, &mut r),
            Dense::new(width, width, Activation::Relu, &mut r),
            Dense::new(width, width, Activation::Linear, &mut r),
        ]);
        let vocab_hash = vocab.hash();
        DssmModel {
            tower,
            vocab,
            vocab_hash,
            loss_history: Vec::new(),
        }
    }

    pub fn embed(&self, u: &Unit) -> Result<Vec<T>> {
        self.tower.infer(&self.vocab.extract(u).to_dense())
    }

    /// Cosine similarity of the two embeddings.
    pub fn relevance(&self, a: &Unit, b: &Unit) -> Result<T> {
        cosine_sim(&self.embed(a)?, &self.embed(b)?)
    }

    pub fn to_archive(&self) -> ModelArchive {
        let dims = std::iter::once(self.tower.input_dim())
            .chain(self.tower.layers.iter().map(|l| l.outputs))
            .collect();
        let mut a = ModelArchive::new::<T>(ModelKind::Dssm, dims, VocabSnapshot::Features(self.vocab.clone()));
        for (k, l) in self.tower.layers.iter().enumerate() {
            a.push_dense(&format!("layer{k}"), l);
        }
        a.set("layers", self.tower.layers.len());
        a.set("loss_history", &self.loss_history);
        a
    }

    pub fn from_archive(a: &ModelArchive) -> Result<Self> {
        a.validate()?;
        a.expect_kind(ModelKind::Dssm)?;
        let VocabSnapshot::Features(vocab) = &a.vocabulary else {
            return Err(Error::Parse("relevance archive holds a note vocabulary".into()));
        };
        let n: usize = a.get("layers")?;
        let layers = (0..n).map(|k| a.read_dense(&format!("layer{k}"))).collect::<Result<Vec<Dense<T>>>>()?;
        let chained = layers.first().is_some_and(|l| l.inputs == vocab.dim())
            && layers.windows(2).all(|w| w[0].outputs == w[1].inputs);
        if !chained {
            return Err(Error::Shape("relevance tower layers do not chain".into()));
        }
        Ok(DssmModel {
            tower: Stack::new(layers),
            vocab: vocab.clone(),
            vocab_hash: a.vocab_hash.clone(),
            loss_history: a.get("loss_history")?,
        })
    }
}

impl<T: Scalar> Embedder<T> for DssmModel<T> {
    fn embed(&self, u: &Unit) -> Result<Vec<T>> {
        DssmModel::embed(self, u)
    }

    fn vocab_hash(&self) -> String {
        self.vocab_hash.clone()
    }
}

fn evaluation_loss<T: Scalar>(tower: &Stack<T>, inputs: &[(Vec<T>, Vec<T>)], negatives: &[Vec<usize>]) -> Result<f64> {
    let emb = inputs
        .par_iter()
        .map(|(a, b)| Ok((tower.infer(a)?, tower.infer(b)?)))
        .collect::<Result<Vec<_>>>()?;
    let losses = (0..inputs.len())
        .into_par_iter()
        .map(|i| {
            let cands: Vec<&[T]> = std::iter::once(i)
                .chain(negatives[i].iter().copied())
                .map(|k| emb[k].1.as_slice())
                .collect();
            if any_zero_norm(&cands) || any_zero_norm(&[&emb[i].0]) {
                return Ok(None);
            }
            softmax_relevance(&emb[i].0, &cands, 0).map(|(_, l)| Some(l.as_f64()))
        })
        .collect::<Result<Vec<Option<f64>>>>()?;
    let live: Vec<f64> = losses.into_iter().flatten().collect();
    Ok(live.iter().sum::<f64>() / live.len().max(1) as f64)
}

/// Minimizes `-log prod P(u_n | u_{n-1})`, each probability a softmax of
/// cosine similarities over the true successor and the successors of
/// `cfg.negatives` other pairs from the same shuffled mini-batch.
pub fn train_dssm<T: Scalar>(pairs: &[(Unit, Unit)], vocab: &FeatureVocabulary, cfg: &TrainConfig) -> Result<DssmModel<T>> {
    train_dssm_width(pairs, vocab, DSSM_WIDTH, cfg)
}

pub fn train_dssm_width<T: Scalar>(
    pairs: &[(Unit, Unit)],
    vocab: &FeatureVocabulary,
    width: usize,
    cfg: &TrainConfig,
) -> Result<DssmModel<T>> {
    cfg.validate()?;
    let n = pairs.len();
    if n < cfg.negatives + 1 {
        return Err(Error::TooSmall(format!("{n} pairs cannot supply {} negatives", cfg.negatives)));
    }
    let mut model = DssmModel::<T>::init(vocab.clone(), width, cfg.seed);
    let inputs: Vec<(Vec<T>, Vec<T>)> = pairs
        .par_iter()
        .map(|(a, b)| (vocab.extract(a).to_dense(), vocab.extract(b).to_dense()))
        .collect();
    let mut eval_rng = rng::stream(cfg.seed, "dssm-eval");
    let eval_negs: Vec<Vec<usize>> = (0..n)
        .map(|i| rng::sample_excluding(&mut eval_rng, n, i, cfg.negatives))
        .collect();
    model.loss_history.push(evaluation_loss(&model.tower, &inputs, &eval_negs)?);

    let mut opt = Optimizer::new(cfg);
    let mut shuffle_rng = rng::stream(cfg.seed, "dssm-shuffle");
    let mut neg_rng = rng::stream(cfg.seed, "dssm-negatives");
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut shuffle_rng);
        for batch in batches(&order, cfg.batch_size, cfg.negatives + 1) {
            let tower = &model.tower;
            let caches = batch
                .par_iter()
                .map(|&i| {
                    let mut ra = rng::indexed(cfg.seed, "dssm-dropout-a", epoch as u64, i as u64);
                    let mut rb = rng::indexed(cfg.seed, "dssm-dropout-b", epoch as u64, i as u64);
                    Ok((
                        tower.forward(&inputs[i].0, Some((cfg.dropout_keep, &mut ra)))?,
                        tower.forward(&inputs[i].1, Some((cfg.dropout_keep, &mut rb)))?,
                    ))
                })
                .collect::<Result<Vec<(StackCache<T>, StackCache<T>)>>>()?;
            let negs: Vec<Vec<usize>> = (0..batch.len())
                .map(|b| rng::sample_excluding(&mut neg_rng, batch.len(), b, cfg.negatives))
                .collect();
            let qs: Vec<Vec<T>> = caches.iter().map(|c| c.0.output.clone()).collect();
            let cs: Vec<Vec<T>> = caches.iter().map(|c| c.1.output.clone()).collect();
            let (_, dqs, dcs) = batch_relevance_backward(&qs, &cs, &negs)?;
            let mut grads = grouped_grads(tower, batch.len(), |b, g| {
                tower.backward(&caches[b].0, &dqs[b], g)?;
                tower.backward(&caches[b].1, &dcs[b], g)
            })?;
            opt.step(&mut model.tower, &mut grads)?;
        }
        model.loss_history.push(evaluation_loss(&model.tower, &inputs, &eval_negs)?);
    }
    Ok(model)
}

/// Summed pair loss for a fixed choice of negatives, with dropout off.
pub fn pair_loss<T: Scalar>(tower: &Stack<T>, inputs: &[(Vec<T>, Vec<T>)], negatives: &[Vec<usize>]) -> Result<T> {
    let emb = inputs
        .iter()
        .map(|(a, b)| Ok((tower.infer(a)?, tower.infer(b)?)))
        .collect::<Result<Vec<_>>>()?;
    let qs: Vec<Vec<T>> = emb.iter().map(|e| e.0.clone()).collect();
    let cs: Vec<Vec<T>> = emb.iter().map(|e| e.1.clone()).collect();
    Ok(batch_relevance_backward(&qs, &cs, negatives)?.0)
}

/// Gradient of `pair_loss` with respect to the tower parameters.
pub fn pair_loss_grads<T: Scalar>(tower: &Stack<T>, inputs: &[(Vec<T>, Vec<T>)], negatives: &[Vec<usize>]) -> Result<Stack<T>> {
    let caches = inputs
        .iter()
        .map(|(a, b)| Ok((tower.forward(a, None)?, tower.forward(b, None)?)))
        .collect::<Result<Vec<_>>>()?;
    let qs: Vec<Vec<T>> = caches.iter().map(|c: &(StackCache<T>, StackCache<T>)| c.0.output.clone()).collect();
    let cs: Vec<Vec<T>> = caches.iter().map(|c| c.1.output.clone()).collect();
    let (_, dqs, dcs) = batch_relevance_backward(&qs, &cs, negatives)?;
    let mut g = tower.zeros_like();
    for (b, c) in caches.iter().enumerate() {
        tower.backward(&c.0, &dqs[b], &mut g)?;
        tower.backward(&c.1, &dcs[b], &mut g)?;
    }
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::music::{Duration, Measure, Note, Piece, Pitch};
    use crate::nn::grad_check;
    use crate::toy;

    fn piece(measures: usize) -> Piece {
        let q = Duration::new(1, 4).unwrap();
        Piece::new(
            "p",
            (0..measures)
                .map(|i| Measure::new(vec![Note::new(Pitch::midi(50 + i as u8), q); 4], Duration::WHOLE))
                .collect(),
        )
    }

    #[test]
    fn pair_counts() {
        let c8 = Corpus::new(vec![piece(8)]).unwrap();
        assert_eq!(make_training_pairs(&c8, 4).unwrap().len(), 1);
        let pairs = make_training_pairs(&c8, 2).unwrap();
        assert_eq!(pairs.len(), 3);
        assert_eq!(pairs[1].0.measures, c8.pieces[0].measures[2..4]);
        assert_eq!(pairs[1].1.measures, c8.pieces[0].measures[4..6]);
        let c4 = Corpus::new(vec![piece(4)]).unwrap();
        assert!(matches!(make_training_pairs(&c4, 4), Err(Error::TooSmall(_))));
    }

    #[test]
    fn relevance_properties() {
        let c = toy::corpus(3, 8, 2);
        let pairs = make_training_pairs(&c, 2).unwrap();
        let v = FeatureVocabulary::from_units(pairs.iter().flat_map(|(a, b)| [a, b])).unwrap();
        let m = DssmModel::<f64>::init(v, 16, 1);
        let (a, b) = (&pairs[0].0, &pairs[3].1);
        assert!((m.relevance(a, a).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(m.relevance(a, b).unwrap(), m.relevance(b, a).unwrap());
        assert_eq!(m.embed(a).unwrap().len(), 16);
        let full = DssmModel::<f64>::init(m.vocab.clone(), DSSM_WIDTH, 1);
        assert_eq!(full.embed(a).unwrap().len(), 128);
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let c = toy::corpus(2, 8, 3);
        let pairs = make_training_pairs(&c, 1).unwrap();
        let v = FeatureVocabulary::from_units(pairs.iter().flat_map(|(a, b)| [a, b])).unwrap();
        let m = DssmModel::<f64>::init(v.clone(), 6, 5);
        let inputs: Vec<(Vec<f64>, Vec<f64>)> = pairs
            .iter()
            .take(6)
            .map(|(a, b)| (v.extract(a).to_dense(), v.extract(b).to_dense()))
            .collect();
        let mut r = rng::stream(1, "t");
        let negs: Vec<Vec<usize>> = (0..6).map(|i| rng::sample_excluding(&mut r, 6, i, 4)).collect();
        let g = pair_loss_grads(&m.tower, &inputs, &negs).unwrap();
        let err = grad_check(&m.tower, &g, |t: &Stack<f64>| pair_loss(t, &inputs, &negs).unwrap(), 1e-6, 300, 2);
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn training_contract() {
        let c = toy::corpus(4, 8, 6);
        let pairs = make_training_pairs(&c, 2).unwrap();
        let v = FeatureVocabulary::from_units(pairs.iter().flat_map(|(a, b)| [a, b])).unwrap();
        let frozen = TrainConfig {
            learning_rate: 0.0,
            epochs: 2,
            ..Default::default()
        };
        let m = train_dssm_width::<f64>(&pairs, &v, 16, &frozen).unwrap();
        assert!(m.loss_history.windows(2).all(|w| w[0] == w[1]));
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 8,
            ..Default::default()
        };
        let a = train_dssm_width::<f64>(&pairs, &v, 16, &cfg).unwrap();
        let b = train_dssm_width::<f64>(&pairs, &v, 16, &cfg).unwrap();
        assert_eq!(a, b);
        assert!(train_dssm::<f64>(&pairs[..3], &v, &cfg).is_err());
        let back = DssmModel::<f64>::from_archive(&ModelArchive::from_bytes(&a.to_archive().to_bytes()).unwrap()).unwrap();
        assert_eq!(back, a);
    }
}
