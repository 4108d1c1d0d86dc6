//! Monophonic symbolic music with exact rational durations.

use std::fmt;

use num_rational::Ratio;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// Largest denominator accepted for a notated duration.
pub const DENOMINATOR_CAP: u32 = 128;

/// Pitch bounds admitted into a unit library.
pub const LIBRARY_PITCH_MIN: i32 = 36;
pub const LIBRARY_PITCH_MAX: i32 = 92;

/// MIDI pitch or rest. Rests use the sentinel value -1.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Pitch(i8);

impl Pitch {
    pub const REST: Pitch = Pitch(-1);

    pub fn new(value: i32) -> Result<Self> {
        match value {
            -1 => Ok(Pitch::REST),
            0..=127 => Ok(Pitch(value as i8)),
            _ => Err(Error::Parse(format!("pitch {value} outside [-1, 127]"))),
        }
    }

    pub fn midi(value: u8) -> Self {
        assert!(value <= 127, "midi pitch {value} out of range");
        Pitch(value as i8)
    }

    pub fn is_rest(self) -> bool {
        self.0 < 0
    }

    /// Raw value; -1 for a rest.
    pub fn value(self) -> i32 {
        self.0 as i32
    }

    /// Shifts a sounding pitch; rests are unchanged. `None` leaves MIDI range.
    pub fn shifted(self, semitones: i32) -> Option<Pitch> {
        if self.is_rest() {
            return Some(self);
        }
        let v = self.value() + semitones;
        (0..=127).contains(&v).then(|| Pitch(v as i8))
    }
}

impl fmt::Debug for Pitch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_rest() {
            f.write_str("REST")
        } else {
            write!(f, "{}", self.0)
        }
    }
}

impl Serialize for Pitch {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_i32(self.value())
    }
}

impl<'de> Deserialize<'de> for Pitch {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let v = i32::deserialize(d)?;
        Pitch::new(v).map_err(serde::de::Error::custom)
    }
}

/// Pitch reduced to one octave; rests form a thirteenth class.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PitchClass {
    Class(u8),
    Rest,
}

pub fn pitch_class(p: Pitch) -> PitchClass {
    if p.is_rest() {
        PitchClass::Rest
    } else {
        PitchClass::Class((p.value() % 12) as u8)
    }
}

/// Positive fraction of a whole note, always in lowest terms.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Duration(Ratio<u32>);

impl Duration {
    pub const WHOLE: Duration = Duration(Ratio::new_raw(1, 1));

    /// A notated duration; the reduced denominator must not exceed the cap.
    pub fn new(num: u32, den: u32) -> Result<Self> {
        if num == 0 || den == 0 {
            return Err(Error::Duration {
                num: num as i64,
                den: den as i64,
                reason: "numerator and denominator must be positive",
            });
        }
        let r = Ratio::new(num, den);
        if *r.denom() > DENOMINATOR_CAP {
            return Err(Error::Duration {
                num: num as i64,
                den: den as i64,
                reason: "denominator exceeds 128",
            });
        }
        Ok(Duration(r))
    }

    pub fn numer(self) -> u32 {
        *self.0.numer()
    }

    pub fn denom(self) -> u32 {
        *self.0.denom()
    }

    pub fn as_f64(self) -> f64 {
        self.numer() as f64 / self.denom() as f64
    }

    pub fn half(self) -> Result<Self> {
        let r = self.0 / 2;
        if *r.denom() > DENOMINATOR_CAP {
            return Err(Error::DenominatorCap {
                cap: DENOMINATOR_CAP,
            });
        }
        Ok(Duration(r))
    }

    /// Exact sum; the result is a measure length, not a notated value, so it is not capped.
    pub fn sum(self, other: Duration) -> Duration {
        Duration(self.0 + other.0)
    }

    /// `self - other` when strictly positive.
    pub fn minus(self, other: Duration) -> Option<Duration> {
        (self.0 > other.0).then(|| Duration(self.0 - other.0))
    }
}

impl fmt::Debug for Duration {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.numer(), self.denom())
    }
}

impl fmt::Display for Duration {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

impl Serialize for Duration {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        [self.numer(), self.denom()].serialize(s)
    }
}

impl<'de> Deserialize<'de> for Duration {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let [num, den] = <[u32; 2]>::deserialize(d)?;
        Duration::new(num, den).map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Note {
    pub pitch: Pitch,
    #[serde(rename = "dur")]
    pub duration: Duration,
    #[serde(rename = "tie_prev", default)]
    pub tie_from_prev: bool,
    #[serde(rename = "tie_next", default)]
    pub tie_to_next: bool,
}

impl Note {
    pub fn new(pitch: Pitch, duration: Duration) -> Self {
        Note {
            pitch,
            duration,
            tie_from_prev: false,
            tie_to_next: false,
        }
    }

    pub fn rest(duration: Duration) -> Self {
        Note::new(Pitch::REST, duration)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Measure {
    pub notes: Vec<Note>,
    pub meter: Duration,
}

impl Measure {
    pub fn new(notes: Vec<Note>, meter: Duration) -> Self {
        Measure { notes, meter }
    }

    /// The canonical empty measure: a single rest filling the meter.
    pub fn empty(meter: Duration) -> Self {
        Measure::new(vec![Note::rest(meter)], meter)
    }
}

pub fn measure_sum(m: &Measure) -> Duration {
    let mut notes = m.notes.iter();
    let first = notes.next().expect("measure_sum on a measure with no notes");
    notes.fold(first.duration, |acc, n| acc.sum(n.duration))
}

/// A fixed-length span of measures; the element of selection.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Unit {
    pub measures: Vec<Measure>,
}

impl Unit {
    pub fn new(measures: Vec<Measure>) -> Self {
        Unit { measures }
    }

    pub fn len(&self) -> usize {
        self.measures.len()
    }

    pub fn is_empty(&self) -> bool {
        self.measures.is_empty()
    }

    pub fn notes(&self) -> impl Iterator<Item = &Note> + '_ {
        self.measures.iter().flat_map(|m| m.notes.iter())
    }

    pub fn note_count(&self) -> usize {
        self.measures.iter().map(|m| m.notes.len()).sum()
    }

    pub fn meter(&self) -> Option<Duration> {
        self.measures.first().map(|m| m.meter)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Piece {
    pub id: String,
    pub measures: Vec<Measure>,
}

impl Piece {
    pub fn new(id: impl Into<String>, measures: Vec<Measure>) -> Self {
        Piece {
            id: id.into(),
            measures,
        }
    }

    /// Concatenates units, repairing tie flags at the seams so the result is a valid piece.
    pub fn from_units<'a>(id: impl Into<String>, units: impl IntoIterator<Item = &'a Unit>) -> Self {
        let mut measures: Vec<Measure> = units
            .into_iter()
            .flat_map(|u| u.measures.iter().cloned())
            .collect();
        repair_ties(&mut measures);
        Piece::new(id, measures)
    }

    pub fn notes(&self) -> impl Iterator<Item = &Note> + '_ {
        self.measures.iter().flat_map(|m| m.notes.iter())
    }

    pub fn meter(&self) -> Option<Duration> {
        self.measures.first().map(|m| m.meter)
    }

    /// Splits into consecutive non-overlapping units; trailing measures that
    /// do not fill a unit are dropped.
    pub fn units(&self, unit_length: usize) -> Vec<Unit> {
        self.measures
            .chunks_exact(unit_length)
            .map(|c| Unit::new(c.to_vec()))
            .collect()
    }
}

/// Clears tie flags that do not pair up with an equal-pitch neighbour.
pub fn repair_ties(measures: &mut [Measure]) {
    let locs: Vec<(usize, usize)> = measures
        .iter()
        .enumerate()
        .flat_map(|(mi, m)| (0..m.notes.len()).map(move |ni| (mi, ni)))
        .collect();
    for w in locs.windows(2) {
        let (a, b) = (w[0], w[1]);
        let prev = measures[a.0].notes[a.1];
        let next = measures[b.0].notes[b.1];
        let joined = prev.tie_to_next
            && next.tie_from_prev
            && prev.pitch == next.pitch
            && !prev.pitch.is_rest();
        measures[a.0].notes[a.1].tie_to_next = joined;
        measures[b.0].notes[b.1].tie_from_prev = joined;
    }
    if let Some(&(mi, ni)) = locs.first() {
        measures[mi].notes[ni].tie_from_prev = false;
    }
    if let Some(&(mi, ni)) = locs.last() {
        measures[mi].notes[ni].tie_to_next = false;
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ViolationKind {
    EmptyPiece,
    EmptyMeasure,
    DurationMismatch { expected: Duration, found: Duration },
    MeterMismatch { expected: Duration, found: Duration },
    PitchOutOfRange(i32),
    TiedRest,
    DanglingTie,
    TieMismatch,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Violation {
    pub kind: ViolationKind,
    pub measure: usize,
    pub note: Option<usize>,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match &self.kind {
            ViolationKind::EmptyPiece => "empty-piece".to_string(),
            ViolationKind::EmptyMeasure => "empty-measure".to_string(),
            ViolationKind::DurationMismatch { expected, found } => {
                format!("duration-mismatch ({found} vs meter {expected})")
            }
            ViolationKind::MeterMismatch { expected, found } => {
                format!("meter-mismatch ({found} vs {expected})")
            }
            ViolationKind::PitchOutOfRange(p) => format!("pitch-out-of-range ({p})"),
            ViolationKind::TiedRest => "tied-rest".to_string(),
            ViolationKind::DanglingTie => "dangling-tie".to_string(),
            ViolationKind::TieMismatch => "tie-mismatch".to_string(),
        };
        write!(f, "{name} at m{}", self.measure)?;
        if let Some(n) = self.note {
            write!(f, " n{n}")?;
        }
        Ok(())
    }
}

/// Reports every broken measure or tie invariant. An empty list means the piece is valid.
///
/// A short first measure (pickup) is reported as a duration mismatch.
pub fn validate_piece(p: &Piece) -> Vec<Violation> {
    let mut out = Vec::new();
    let v = |kind, measure, note| Violation {
        kind,
        measure,
        note,
    };
    let Some(meter) = p.meter() else {
        out.push(v(ViolationKind::EmptyPiece, 0, None));
        return out;
    };
    for (mi, m) in p.measures.iter().enumerate() {
        if m.meter != meter {
            out.push(v(
                ViolationKind::MeterMismatch {
                    expected: meter,
                    found: m.meter,
                },
                mi,
                None,
            ));
        }
        if m.notes.is_empty() {
            out.push(v(ViolationKind::EmptyMeasure, mi, None));
            continue;
        }
        let total = measure_sum(m);
        if total != m.meter {
            out.push(v(
                ViolationKind::DurationMismatch {
                    expected: m.meter,
                    found: total,
                },
                mi,
                None,
            ));
        }
        for (ni, n) in m.notes.iter().enumerate() {
            if n.pitch.is_rest() && (n.tie_from_prev || n.tie_to_next) {
                out.push(v(ViolationKind::TiedRest, mi, Some(ni)));
            }
        }
    }

    let locs: Vec<(usize, usize, &Note)> = p
        .measures
        .iter()
        .enumerate()
        .flat_map(|(mi, m)| m.notes.iter().enumerate().map(move |(ni, n)| (mi, ni, n)))
        .collect();
    if let Some(&(mi, ni, n)) = locs.first() {
        if n.tie_from_prev {
            out.push(v(ViolationKind::DanglingTie, mi, Some(ni)));
        }
    }
    for w in locs.windows(2) {
        let (_, _, a) = w[0];
        let (mi, ni, b) = w[1];
        if a.tie_to_next != b.tie_from_prev || (a.tie_to_next && a.pitch != b.pitch) {
            out.push(v(ViolationKind::TieMismatch, mi, Some(ni)));
        }
    }
    if let Some(&(mi, ni, n)) = locs.last() {
        if n.tie_to_next {
            out.push(v(ViolationKind::DanglingTie, mi, Some(ni)));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn d(n: u32, den: u32) -> Duration {
        Duration::new(n, den).unwrap()
    }

    fn notes(pitches: &[i32], dur: Duration) -> Vec<Note> {
        pitches
            .iter()
            .map(|&p| Note::new(Pitch::new(p).unwrap(), dur))
            .collect()
    }

    #[test]
    fn pitch_class_examples() {
        assert_eq!(pitch_class(Pitch::midi(60)), PitchClass::Class(0));
        assert_eq!(pitch_class(Pitch::midi(61)), PitchClass::Class(1));
        assert_eq!(pitch_class(Pitch::REST), PitchClass::Rest);
        for p in 0..=115u8 {
            assert_eq!(pitch_class(Pitch::midi(p)), pitch_class(Pitch::midi(p + 12)));
        }
    }

    #[test]
    fn measure_sum_examples() {
        let m = Measure::new(notes(&[60; 4], d(1, 4)), Duration::WHOLE);
        assert_eq!(measure_sum(&m), Duration::WHOLE);
        let m = Measure::new(notes(&[60; 2], d(1, 2)), Duration::WHOLE);
        assert_eq!(measure_sum(&m), Duration::WHOLE);
        let m = Measure::new(notes(&[60; 3], d(1, 3)), Duration::WHOLE);
        assert_eq!(measure_sum(&m), Duration::WHOLE);
    }

    #[test]
    fn durations_reduce_and_cap() {
        assert_eq!(d(2, 8), d(1, 4));
        assert_eq!(d(64, 256).denom(), 4);
        assert!(Duration::new(1, 256).is_err());
        assert!(Duration::new(0, 4).is_err());
        assert!(d(1, 128).half().is_err());
        assert_eq!(d(1, 4).half().unwrap(), d(1, 8));
        assert_eq!(d(3, 4).half().unwrap(), d(3, 8));
    }

    #[test]
    fn validate_examples() {
        let full = Measure::new(notes(&[60; 4], d(1, 4)), Duration::WHOLE);
        let p = Piece::new("ok", vec![full.clone(), full.clone()]);
        assert!(validate_piece(&p).is_empty());

        let short = Measure::new(notes(&[60; 3], d(1, 4)), Duration::WHOLE);
        let v = validate_piece(&Piece::new("short", vec![short]));
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].to_string(), "duration-mismatch (3/4 vs meter 1/1) at m0");

        let mut tied = full.clone();
        tied.notes[3].tie_to_next = true;
        let v = validate_piece(&Piece::new("dangling", vec![full.clone(), tied]));
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].kind, ViolationKind::DanglingTie);
        assert_eq!(v[0].measure, 1);
    }

    #[test]
    fn tie_pairing_across_barline() {
        let mut a = Measure::new(notes(&[60, 62], d(1, 2)), Duration::WHOLE);
        let mut b = Measure::new(notes(&[62, 64], d(1, 2)), Duration::WHOLE);
        a.notes[1].tie_to_next = true;
        b.notes[0].tie_from_prev = true;
        assert!(validate_piece(&Piece::new("t", vec![a.clone(), b.clone()])).is_empty());

        b.notes[0].pitch = Pitch::midi(63);
        let v = validate_piece(&Piece::new("t", vec![a.clone(), b.clone()]));
        assert_eq!(v[0].kind, ViolationKind::TieMismatch);

        let mut ms = vec![a, b];
        repair_ties(&mut ms);
        assert!(validate_piece(&Piece::new("t", ms)).is_empty());
    }

    #[test]
    fn rests_cannot_be_tied() {
        let mut m = Measure::empty(Duration::WHOLE);
        m.notes[0].tie_to_next = true;
        let v = validate_piece(&Piece::new("r", vec![m, Measure::empty(Duration::WHOLE)]));
        assert!(v.iter().any(|x| x.kind == ViolationKind::TiedRest));
    }

    #[test]
    fn rest_serializes_as_minus_one() {
        let n = Note::rest(Duration::WHOLE);
        let s = serde_json::to_string(&n).unwrap();
        assert_eq!(s, r#"{"pitch":-1,"dur":[1,1],"tie_prev":false,"tie_next":false}"#);
        let back: Note = serde_json::from_str(&s).unwrap();
        assert_eq!(back, n);
    }
}
