//! Pitch and time augmentation, and unit-library construction.

use indexmap::IndexMap;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::music::{Duration, Measure, Note, Piece, Pitch, Unit, LIBRARY_PITCH_MAX, LIBRARY_PITCH_MIN};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PitchRange {
    pub min: i32,
    pub max: i32,
}

impl Default for PitchRange {
    fn default() -> Self {
        PitchRange {
            min: LIBRARY_PITCH_MIN,
            max: LIBRARY_PITCH_MAX,
        }
    }
}

impl PitchRange {
    pub fn contains(&self, p: Pitch) -> bool {
        p.is_rest() || (self.min..=self.max).contains(&p.value())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IntervalOp {
    Add(i32),
    /// Multiply by `num / den`, rounding half away from zero.
    Mul(i32, i32),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentMode {
    Full,
    TransposeOnly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub unit_length: usize,
    pub pitch_range: PitchRange,
    pub transpose_shifts: Vec<i32>,
    pub interval_add_constants: Vec<i32>,
    pub interval_mul_constants: Vec<(i32, i32)>,
    pub enable_double_time: bool,
    pub mode: AugmentMode,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            unit_length: 1,
            pitch_range: PitchRange::default(),
            transpose_shifts: vec![-1, 0, 1],
            interval_add_constants: vec![-2, -1, 1, 2],
            interval_mul_constants: vec![(1, 2), (2, 1)],
            enable_double_time: true,
            mode: AugmentMode::Full,
        }
    }
}

impl AugmentConfig {
    pub fn transpose_only(unit_length: usize, shifts: Vec<i32>) -> Self {
        AugmentConfig {
            unit_length,
            transpose_shifts: shifts,
            mode: AugmentMode::TransposeOnly,
            ..Default::default()
        }
    }

    /// Every shift keeping some pitch of `[min, max]` reachable, i.e. the
    /// "cover the whole range" transposition set.
    pub fn full_range_shifts(range: PitchRange) -> Vec<i32> {
        let span = range.max - range.min;
        (-span..=span).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TransformError {
    OutOfRange,
    NoPitchedNotes,
}

fn map_pitches(u: &Unit, mut f: impl FnMut(usize, &Note) -> Pitch) -> Unit {
    let mut k = 0;
    Unit::new(
        u.measures
            .iter()
            .map(|m| {
                let notes = m
                    .notes
                    .iter()
                    .map(|n| {
                        let p = f(k, n);
                        k += 1;
                        Note { pitch: p, ..*n }
                    })
                    .collect();
                Measure::new(notes, m.meter)
            })
            .collect(),
    )
}

fn check_range(u: Unit, range: PitchRange) -> Result<Unit, TransformError> {
    if u.notes().all(|n| range.contains(n.pitch)) {
        Ok(u)
    } else {
        Err(TransformError::OutOfRange)
    }
}

/// Shifts every sounding pitch; rhythm, rests and ties are untouched.
pub fn transpose(u: &Unit, semitones: i32, range: PitchRange) -> Result<Unit, TransformError> {
    let mut ok = true;
    let out = map_pitches(u, |_, n| {
        n.pitch.shifted(semitones).unwrap_or_else(|| {
            ok = false;
            n.pitch
        })
    });
    if !ok {
        return Err(TransformError::OutOfRange);
    }
    check_range(out, range)
}

fn scale_interval(interval: i32, num: i32, den: i32) -> i32 {
    let x = interval as i64 * num as i64;
    let d = den as i64;
    let (x, d) = if d < 0 { (-x, -d) } else { (x, d) };
    let q = (2 * x.abs() + d) / (2 * d);
    (q * x.signum()) as i32
}

/// Rewrites successive intervals between sounding notes, keeping the first
/// sounding pitch and the original rhythm. Rests pass through and contribute
/// no interval; a note tied from its predecessor keeps that predecessor's new pitch.
pub fn interval_transform(u: &Unit, op: IntervalOp, range: PitchRange) -> Result<Unit, TransformError> {
    let notes: Vec<&Note> = u.notes().collect();
    if notes.iter().all(|n| n.pitch.is_rest()) {
        return Err(TransformError::NoPitchedNotes);
    }
    let mut new_pitches: Vec<Pitch> = Vec::with_capacity(notes.len());
    let mut prev: Option<(i32, i32)> = None; // (old, new) of the last sounding note
    let mut ok = true;
    for (i, n) in notes.iter().enumerate() {
        if n.pitch.is_rest() {
            new_pitches.push(n.pitch);
            continue;
        }
        let old = n.pitch.value();
        let tied_in = i > 0 && n.tie_from_prev && notes[i - 1].tie_to_next && notes[i - 1].pitch == n.pitch;
        let new = match prev {
            None => old,
            Some((_, prev_new)) if tied_in => prev_new,
            Some((prev_old, prev_new)) => {
                let interval = old - prev_old;
                prev_new
                    + match op {
                        IntervalOp::Add(c) => interval + c,
                        IntervalOp::Mul(num, den) => scale_interval(interval, num, den),
                    }
            }
        };
        prev = Some((old, new));
        match Pitch::new(new) {
            Ok(p) if (0..=127).contains(&new) => new_pitches.push(p),
            _ => {
                ok = false;
                new_pitches.push(n.pitch);
            }
        }
    }
    if !ok {
        return Err(TransformError::OutOfRange);
    }
    check_range(map_pitches(u, |k, _| new_pitches[k]), range)
}

/// Compresses two consecutive measures into one by halving every duration.
pub fn double_time(m1: &Measure, m2: &Measure) -> Result<Measure> {
    if m1.meter != m2.meter {
        return Err(Error::Meter(format!("{} vs {}", m1.meter, m2.meter)));
    }
    let notes = m1
        .notes
        .iter()
        .chain(&m2.notes)
        .map(|n| {
            Ok(Note {
                duration: n.duration.half()?,
                ..*n
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Measure::new(notes, m1.meter))
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Transform {
    pub shift: i32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub interval: Option<IntervalOp>,
    #[serde(default)]
    pub double_time: bool,
}

/// Where a library unit came from: a source piece, the first source measure, and the transforms applied.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Provenance {
    pub source: String,
    pub offset: usize,
    pub transform: Transform,
}

/// Deduplicated units in first-seen order, each with every origin it was produced from.
#[derive(Clone, Debug, PartialEq)]
pub struct UnitLibrary {
    pub unit_length: usize,
    pub meter: Duration,
    entries: IndexMap<Unit, Vec<Provenance>>,
}

impl UnitLibrary {
    pub fn new(unit_length: usize, meter: Duration) -> Self {
        UnitLibrary {
            unit_length,
            meter,
            entries: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, unit: Unit, origin: Provenance) -> usize {
        let entry = self.entries.entry(unit);
        let idx = entry.index();
        entry.or_default().push(origin);
        idx
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn unit(&self, i: usize) -> &Unit {
        self.entries.get_index(i).expect("library index").0
    }

    pub fn provenance(&self, i: usize) -> &[Provenance] {
        self.entries.get_index(i).expect("library index").1
    }

    pub fn position(&self, u: &Unit) -> Option<usize> {
        self.entries.get_index_of(u)
    }

    pub fn units(&self) -> impl ExactSizeIterator<Item = &Unit> + '_ {
        self.entries.keys()
    }

    pub fn iter(&self) -> impl ExactSizeIterator<Item = (&Unit, &Vec<Provenance>)> + '_ {
        self.entries.iter()
    }

    pub fn from_units(unit_length: usize, meter: Duration, units: impl IntoIterator<Item = Unit>) -> Self {
        let mut lib = UnitLibrary::new(unit_length, meter);
        for (i, u) in units.into_iter().enumerate() {
            lib.insert(
                u,
                Provenance {
                    source: "adhoc".into(),
                    offset: i,
                    transform: Transform {
                        shift: 0,
                        interval: None,
                        double_time: false,
                    },
                },
            );
        }
        lib
    }
}

fn piece_units(p: &Piece, cfg: &AugmentConfig) -> Vec<(Unit, Provenance)> {
    let l = cfg.unit_length;
    let mut out = Vec::new();
    let mut emit = |variant: &Unit, offset: usize, interval: Option<IntervalOp>, dt: bool| {
        for &shift in &cfg.transpose_shifts {
            if let Ok(u) = transpose(variant, shift, cfg.pitch_range) {
                out.push((
                    u,
                    Provenance {
                        source: p.id.clone(),
                        offset,
                        transform: Transform {
                            shift,
                            interval,
                            double_time: dt,
                        },
                    },
                ));
            }
        }
    };
    let n = p.measures.len();
    let full = cfg.mode == AugmentMode::Full;
    for offset in 0..(n + 1).saturating_sub(l) {
        let base = Unit::new(p.measures[offset..offset + l].to_vec());
        emit(&base, offset, None, false);
        if !full {
            continue;
        }
        let ops = cfg
            .interval_add_constants
            .iter()
            .map(|&c| IntervalOp::Add(c))
            .chain(cfg.interval_mul_constants.iter().map(|&(a, b)| IntervalOp::Mul(a, b)));
        for op in ops {
            if let Ok(v) = interval_transform(&base, op, PitchRange { min: 0, max: 127 }) {
                emit(&v, offset, Some(op), false);
            }
        }
    }
    // Double-time units are transposed but not interval-altered.
    if full && cfg.enable_double_time {
        for offset in 0..(n + 1).saturating_sub(2 * l) {
            let span = &p.measures[offset..offset + 2 * l];
            let compressed: Result<Vec<Measure>> = span.chunks(2).map(|c| double_time(&c[0], &c[1])).collect();
            if let Ok(ms) = compressed {
                emit(&Unit::new(ms), offset, None, true);
            }
        }
    }
    out
}

/// Slides a `unit_length` window with stride one over every piece, applies the
/// enabled transforms, and deduplicates. The result does not depend on how the
/// per-piece work is scheduled.
pub fn build_library(c: &Corpus, cfg: &AugmentConfig) -> Result<UnitLibrary> {
    if ![1, 2, 4].contains(&cfg.unit_length) {
        return Err(Error::Invalid(format!(
            "unit length {} must be 1, 2 or 4",
            cfg.unit_length
        )));
    }
    if c.pieces.is_empty() {
        return Err(Error::TooSmall("empty corpus".into()));
    }
    let per_piece: Vec<Vec<(Unit, Provenance)>> = c.pieces.par_iter().map(|p| piece_units(p, cfg)).collect();
    let mut lib = UnitLibrary::new(cfg.unit_length, c.meter);
    for (u, origin) in per_piece.into_iter().flatten() {
        lib.insert(u, origin);
    }
    if lib.is_empty() {
        return Err(Error::TooSmall("no unit survived augmentation".into()));
    }
    Ok(lib)
}

/// Transposes a whole piece; `None` if any pitch leaves the range.
pub fn transpose_piece(p: &Piece, semitones: i32, range: PitchRange) -> Option<Piece> {
    let u = transpose(&Unit::new(p.measures.clone()), semitones, range).ok()?;
    let id = if semitones == 0 {
        p.id.clone()
    } else {
        format!("{}@{semitones:+}", p.id)
    };
    Some(Piece::new(id, u.measures))
}

/// Transposition-only augmentation of whole pieces, for training the sequential models.
pub fn transpose_corpus(c: &Corpus, shifts: &[i32], range: PitchRange) -> Vec<Piece> {
    c.pieces
        .iter()
        .flat_map(|p| shifts.iter().filter_map(move |&k| transpose_piece(p, k, range)))
        .collect()
}
