//! Exact cosine nearest-neighbour search over an embedded unit library.

use std::cmp::Ordering;

use rayon::prelude::*;

use crate::augment::UnitLibrary;
use crate::error::{Error, Result};
use crate::music::Unit;
use crate::scalar::{norm, Scalar};

/// A model that maps units to dense embeddings.
pub trait Embedder<T: Scalar>: Sync {
    fn embed(&self, u: &Unit) -> Result<Vec<T>>;

    fn vocab_hash(&self) -> String;
}

/// A unit library with one precomputed embedding per unit.
#[derive(Clone, Debug)]
pub struct EmbeddedLibrary<'a, T> {
    pub library: &'a UnitLibrary,
    embeddings: Vec<Vec<T>>,
    /// Unit-length copies; zero vectors stay zero and score 0 against everything.
    normalized: Vec<Vec<T>>,
    pub vocab_hash: String,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Scored<T> {
    pub index: usize,
    pub sim: T,
}

pub(crate) fn normalize<T: Scalar>(v: &[T]) -> Vec<T> {
    let n = norm(v);
    if n == T::zero() {
        return vec![T::zero(); v.len()];
    }
    v.iter().map(|&x| x / n).collect()
}

/// Descending by score, then ascending by index.
pub(crate) fn by_score_desc<T: Scalar>(a: &Scored<T>, b: &Scored<T>) -> Ordering {
    b.sim
        .as_f64()
        .total_cmp(&a.sim.as_f64())
        .then(a.index.cmp(&b.index))
}

impl<'a, T: Scalar> EmbeddedLibrary<'a, T> {
    pub fn build(library: &'a UnitLibrary, model: &impl Embedder<T>) -> Result<Self> {
        let units: Vec<&Unit> = library.units().collect();
        let embeddings = units
            .par_iter()
            .map(|u| model.embed(u))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::from_embeddings(library, embeddings, model.vocab_hash()))
    }

    pub fn from_embeddings(library: &'a UnitLibrary, embeddings: Vec<Vec<T>>, vocab_hash: String) -> Self {
        assert_eq!(library.len(), embeddings.len(), "one embedding per library unit");
        let normalized = embeddings.iter().map(|e| normalize(e)).collect();
        EmbeddedLibrary {
            library,
            embeddings,
            normalized,
            vocab_hash,
        }
    }

    pub fn len(&self) -> usize {
        self.embeddings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.embeddings.is_empty()
    }

    pub fn embedding(&self, i: usize) -> &[T] {
        &self.embeddings[i]
    }

    pub fn check_model(&self, model: &impl Embedder<T>) -> Result<()> {
        let found = model.vocab_hash();
        if found != self.vocab_hash {
            return Err(Error::VocabMismatch {
                expected: self.vocab_hash.clone(),
                found,
            });
        }
        Ok(())
    }

    /// Cosine similarity of `query` to every unit, in library order.
    pub fn similarities(&self, query: &[T]) -> Result<Vec<T>> {
        let q = self.normalized_query(query)?;
        Ok(self
            .normalized
            .par_iter()
            .map(|e| crate::scalar::dot(&q, e))
            .collect())
    }

    pub fn similarity_to(&self, query: &[T], i: usize) -> Result<T> {
        let q = self.normalized_query(query)?;
        Ok(crate::scalar::dot(&q, &self.normalized[i]))
    }

    fn normalized_query(&self, query: &[T]) -> Result<Vec<T>> {
        if self.is_empty() {
            return Err(Error::TooSmall("empty library".into()));
        }
        if query.len() != self.embeddings[0].len() {
            return Err(Error::Shape(format!(
                "query of length {} against embeddings of length {}",
                query.len(),
                self.embeddings[0].len()
            )));
        }
        if norm(query) == T::zero() {
            return Err(Error::ZeroNorm);
        }
        Ok(normalize(query))
    }

    /// The `k` most similar units, best first; ties go to the earlier library entry.
    pub fn nearest(&self, query: &[T], k: usize) -> Result<Vec<Scored<T>>> {
        let sims = self.similarities(query)?;
        let mut scored: Vec<Scored<T>> = sims.into_iter().enumerate().map(|(index, sim)| Scored { index, sim }).collect();
        let k = k.min(scored.len());
        if k == 0 {
            return Ok(Vec::new());
        }
        if k < scored.len() {
            scored.select_nth_unstable_by(k - 1, by_score_desc);
            scored.truncate(k);
        }
        scored.sort_by(by_score_desc);
        Ok(scored)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::music::{Duration, Measure, Note, Pitch};

    fn lib(n: usize) -> UnitLibrary {
        let q = Duration::new(1, 4).unwrap();
        UnitLibrary::from_units(
            1,
            Duration::WHOLE,
            (0..n).map(|i| Unit::new(vec![Measure::new(vec![Note::new(Pitch::midi(40 + i as u8), q); 4], Duration::WHOLE)])),
        )
    }

    #[test]
    fn nearest_orders_and_ties() {
        let l = lib(4);
        let e = EmbeddedLibrary::from_embeddings(
            &l,
            vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0], vec![2.0, 0.0]],
            "h".into(),
        );
        let top = e.nearest(&[1.0, 0.1], 10).unwrap();
        assert_eq!(top.len(), 4);
        // units 0 and 3 are colinear; the earlier one wins the tie
        assert_eq!(top[0].index, 0);
        assert_eq!(top[1].index, 3);
        assert_eq!(top[2].index, 2);
        let top1 = e.nearest(&[0.0, 1.0], 1).unwrap();
        assert_eq!(top1[0].index, 1);
        assert!(matches!(e.nearest(&[0.0, 0.0], 1), Err(Error::ZeroNorm)));
    }

    #[test]
    fn single_unit_library_always_wins() {
        let l = lib(1);
        let e = EmbeddedLibrary::from_embeddings(&l, vec![vec![0.3, -0.2]], "h".into());
        for q in [[1.0, 0.0], [-5.0, 2.0], [0.0, -1.0]] {
            assert_eq!(e.nearest(&q, 3).unwrap()[0].index, 0);
        }
    }
}
