//! Bag-of-words style unit featurization.
//!
//! Eight count families (note tuples, pitches, durations, pitch classes,
//! class/duration tuples, and pitch, duration and class bigrams) followed by
//! two tie flags. Each family owns a dense index block ending in one OOV slot.
//! Bigrams run across internal barlines but never across unit boundaries.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augment::UnitLibrary;
use crate::error::{Error, Result};
use crate::music::{pitch_class, Duration, Note, Pitch, PitchClass, Unit};
use crate::scalar::Scalar;

pub const FAMILY_NAMES: [&str; 8] = [
    "note",
    "pitch",
    "duration",
    "class",
    "class_duration",
    "pitch_bigram",
    "duration_bigram",
    "class_bigram",
];

/// Sorted symbol list; index = position, OOV = `len()`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Family<S: Ord>(Vec<S>);

impl<S: Ord + Clone> Family<S> {
    fn from_set(set: BTreeSet<S>) -> Self {
        Family(set.into_iter().collect())
    }

    pub fn symbols(&self) -> &[S] {
        &self.0
    }

    /// Slots including OOV.
    pub fn size(&self) -> usize {
        self.0.len() + 1
    }

    pub fn index(&self, s: &S) -> usize {
        self.0.binary_search(s).unwrap_or(self.0.len())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureVocabulary {
    pub notes: Family<(Pitch, Duration)>,
    pub pitches: Family<Pitch>,
    pub durations: Family<Duration>,
    pub classes: Family<PitchClass>,
    pub class_durations: Family<(PitchClass, Duration)>,
    pub pitch_bigrams: Family<(Pitch, Pitch)>,
    pub duration_bigrams: Family<(Duration, Duration)>,
    pub class_bigrams: Family<(PitchClass, PitchClass)>,
}

#[derive(Default)]
struct Symbols {
    notes: BTreeSet<(Pitch, Duration)>,
    pitches: BTreeSet<Pitch>,
    durations: BTreeSet<Duration>,
    classes: BTreeSet<PitchClass>,
    class_durations: BTreeSet<(PitchClass, Duration)>,
    pitch_bigrams: BTreeSet<(Pitch, Pitch)>,
    duration_bigrams: BTreeSet<(Duration, Duration)>,
    class_bigrams: BTreeSet<(PitchClass, PitchClass)>,
}

impl Symbols {
    fn add_unit(&mut self, u: &Unit) {
        let notes: Vec<&Note> = u.notes().collect();
        for n in &notes {
            let c = pitch_class(n.pitch);
            self.notes.insert((n.pitch, n.duration));
            self.pitches.insert(n.pitch);
            self.durations.insert(n.duration);
            self.classes.insert(c);
            self.class_durations.insert((c, n.duration));
        }
        for w in notes.windows(2) {
            let (a, b) = (w[0], w[1]);
            self.pitch_bigrams.insert((a.pitch, b.pitch));
            self.duration_bigrams.insert((a.duration, b.duration));
            self.class_bigrams.insert((pitch_class(a.pitch), pitch_class(b.pitch)));
        }
    }
}

impl FeatureVocabulary {
    pub fn from_units<'a>(units: impl IntoIterator<Item = &'a Unit>) -> Result<Self> {
        let mut s = Symbols::default();
        let mut any = false;
        for u in units {
            any = true;
            s.add_unit(u);
        }
        if !any {
            return Err(Error::TooSmall("cannot build a vocabulary from no units".into()));
        }
        Ok(FeatureVocabulary {
            notes: Family::from_set(s.notes),
            pitches: Family::from_set(s.pitches),
            durations: Family::from_set(s.durations),
            classes: Family::from_set(s.classes),
            class_durations: Family::from_set(s.class_durations),
            pitch_bigrams: Family::from_set(s.pitch_bigrams),
            duration_bigrams: Family::from_set(s.duration_bigrams),
            class_bigrams: Family::from_set(s.class_bigrams),
        })
    }

    pub fn family_sizes(&self) -> [usize; 8] {
        [
            self.notes.size(),
            self.pitches.size(),
            self.durations.size(),
            self.classes.size(),
            self.class_durations.size(),
            self.pitch_bigrams.size(),
            self.duration_bigrams.size(),
            self.class_bigrams.size(),
        ]
    }

    /// Start index of each family, plus the tie-flag block start at position 8.
    pub fn offsets(&self) -> [usize; 9] {
        let mut out = [0; 9];
        let sizes = self.family_sizes();
        for i in 0..8 {
            out[i + 1] = out[i] + sizes[i];
        }
        out
    }

    pub fn dim(&self) -> usize {
        self.offsets()[8] + 2
    }

    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("vocabulary serialization is infallible");
        Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn extract(&self, u: &Unit) -> FeatureVector {
        let off = self.offsets();
        let mut counts: Vec<(u32, u32)> = Vec::new();
        let mut bump = |i: usize| counts.push((i as u32, 1));
        let notes: Vec<&Note> = u.notes().collect();
        for n in &notes {
            let c = pitch_class(n.pitch);
            bump(off[0] + self.notes.index(&(n.pitch, n.duration)));
            bump(off[1] + self.pitches.index(&n.pitch));
            bump(off[2] + self.durations.index(&n.duration));
            bump(off[3] + self.classes.index(&c));
            bump(off[4] + self.class_durations.index(&(c, n.duration)));
        }
        for w in notes.windows(2) {
            let (a, b) = (w[0], w[1]);
            bump(off[5] + self.pitch_bigrams.index(&(a.pitch, b.pitch)));
            bump(off[6] + self.duration_bigrams.index(&(a.duration, b.duration)));
            bump(off[7] + self.class_bigrams.index(&(pitch_class(a.pitch), pitch_class(b.pitch))));
        }
        if notes.first().is_some_and(|n| n.tie_from_prev) {
            bump(off[8]);
        }
        if notes.last().is_some_and(|n| n.tie_to_next) {
            bump(off[8] + 1);
        }
        counts.sort_unstable();
        let mut entries: Vec<(u32, u32)> = Vec::with_capacity(counts.len());
        for (i, c) in counts {
            match entries.last_mut() {
                Some((j, acc)) if *j == i => *acc += c,
                _ => entries.push((i, c)),
            }
        }
        FeatureVector {
            dim: self.dim(),
            entries,
        }
    }
}

pub fn build_vocab(lib: &UnitLibrary) -> Result<FeatureVocabulary> {
    FeatureVocabulary::from_units(lib.units())
}

/// Sparse non-negative count vector.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct FeatureVector {
    pub dim: usize,
    /// `(index, count)` sorted by index, counts > 0.
    pub entries: Vec<(u32, u32)>,
}

impl FeatureVector {
    pub fn get(&self, i: usize) -> u32 {
        self.entries
            .binary_search_by_key(&(i as u32), |e| e.0)
            .map(|k| self.entries[k].1)
            .unwrap_or(0)
    }

    pub fn to_dense<T: Scalar>(&self) -> Vec<T> {
        let mut v = vec![T::zero(); self.dim];
        for &(i, c) in &self.entries {
            v[i as usize] = T::of(c as f64);
        }
        v
    }

    pub fn range_sum(&self, lo: usize, hi: usize) -> u32 {
        self.entries
            .iter()
            .filter(|(i, _)| (lo..hi).contains(&(*i as usize)))
            .map(|e| e.1)
            .sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::music::Measure;

    fn q() -> Duration {
        Duration::new(1, 4).unwrap()
    }

    fn unit(pitches: &[i32]) -> Unit {
        let notes = pitches.iter().map(|&p| Note::new(Pitch::new(p).unwrap(), q())).collect();
        Unit::new(vec![Measure::new(notes, Duration::WHOLE)])
    }

    #[test]
    fn whole_rest_vocabulary_and_vector() {
        let rest = Unit::new(vec![Measure::empty(Duration::WHOLE)]);
        let v = FeatureVocabulary::from_units([&rest]).unwrap();
        assert_eq!(v.pitches.symbols(), [Pitch::REST]);
        assert_eq!(v.durations.symbols(), [Duration::WHOLE]);
        assert!(v.pitch_bigrams.symbols().is_empty());
        assert!(v.duration_bigrams.symbols().is_empty());
        assert!(v.class_bigrams.symbols().is_empty());

        let f = v.extract(&rest);
        let off = v.offsets();
        assert_eq!(f.get(off[0] + v.notes.index(&(Pitch::REST, Duration::WHOLE))), 1);
        assert_eq!(f.get(off[1]), 1);
        assert_eq!(f.get(off[2]), 1);
        assert_eq!(f.get(off[3] + v.classes.index(&PitchClass::Rest)), 1);
        assert_eq!(f.get(off[8]), 0);
        assert_eq!(f.get(off[8] + 1), 0);
        assert_eq!(f.entries.iter().map(|e| e.1).sum::<u32>(), 5);
    }

    #[test]
    fn repeated_quarter_counts() {
        let u = unit(&[60; 4]);
        let v = FeatureVocabulary::from_units([&u]).unwrap();
        let f = v.extract(&u);
        let off = v.offsets();
        let c4 = Pitch::midi(60);
        assert_eq!(f.get(off[1] + v.pitches.index(&c4)), 4);
        assert_eq!(f.get(off[2] + v.durations.index(&q())), 4);
        assert_eq!(f.get(off[5] + v.pitch_bigrams.index(&(c4, c4))), 3);
    }

    #[test]
    fn octave_transposition_keeps_class_features() {
        let a = unit(&[60, 64, 67, 71]);
        let b = unit(&[72, 76, 79, 83]);
        let v = FeatureVocabulary::from_units([&a, &b]).unwrap();
        let off = v.offsets();
        let (fa, fb) = (v.extract(&a), v.extract(&b));
        for fam in [3, 4, 7] {
            for i in off[fam]..off[fam + 1] {
                assert_eq!(fa.get(i), fb.get(i));
            }
        }
        assert_ne!(fa.range_sum(off[1], off[2] - 1), 0);
        let shared: Vec<usize> = (off[1]..off[2]).filter(|&i| fa.get(i) > 0 && fb.get(i) > 0).collect();
        assert!(shared.is_empty());
    }

    #[test]
    fn shared_symbols_give_same_vocabulary() {
        let a = unit(&[60, 62, 60, 62]);
        let b = unit(&[62, 60, 62, 60]);
        let va = FeatureVocabulary::from_units([&a]).unwrap();
        let vab = FeatureVocabulary::from_units([&a, &b]).unwrap();
        assert_eq!(va, vab);
        assert_eq!(va.hash(), vab.hash());
    }

    #[test]
    fn unseen_symbols_go_to_oov() {
        let a = unit(&[60; 4]);
        let v = FeatureVocabulary::from_units([&a]).unwrap();
        let f = v.extract(&unit(&[61; 4]));
        let off = v.offsets();
        assert_eq!(f.get(off[1] + v.pitches.symbols().len()), 4);
        assert_eq!(f.get(off[5] + v.pitch_bigrams.symbols().len()), 3);
    }

    #[test]
    fn tie_flags_from_unit_edges() {
        let mut u = unit(&[60, 62, 64, 65]);
        u.measures[0].notes[0].tie_from_prev = true;
        let v = FeatureVocabulary::from_units([&u]).unwrap();
        let f = v.extract(&u);
        assert_eq!(f.get(v.offsets()[8]), 1);
        assert_eq!(f.get(v.offsets()[8] + 1), 0);
        assert_eq!(v.dim(), v.offsets()[8] + 2);
    }

    #[test]
    fn empty_input_rejected() {
        assert!(FeatureVocabulary::from_units(std::iter::empty()).is_err());
    }
}
