//! Seeded synthetic lead-sheet melodies for tests, fixtures and desk-scale
//! experiments.
//!
//! Every piece has its own key, mode, register and a small palette of
//! measure rhythms. Melodies are random walks on the scale with occasional
//! rests, ties over the barline and repeated measures.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::corpus::Corpus;
use crate::music::{Duration, Measure, Note, Piece, Pitch};
use crate::rng::{self, SplitMix64};

const MAJOR: [i32; 7] = [0, 2, 4, 5, 7, 9, 11];
const MINOR: [i32; 7] = [0, 2, 3, 5, 7, 8, 10];

/// Measure rhythms in 4/4, as `(numerator, denominator)` pairs.
const RHYTHMS: [&[(u32, u32)]; 12] = [
    &[(1, 4), (1, 4), (1, 4), (1, 4)],
    &[(1, 2), (1, 4), (1, 4)],
    &[(1, 8), (1, 8), (1, 4), (1, 4), (1, 4)],
    &[(3, 8), (1, 8), (1, 4), (1, 4)],
    &[(1, 4), (1, 8), (1, 8), (1, 2)],
    &[(1, 2), (1, 2)],
    &[(1, 8), (1, 8), (1, 8), (1, 8), (1, 8), (1, 8), (1, 8), (1, 8)],
    &[(1, 1)],
    &[(1, 4), (1, 4), (1, 2)],
    &[(3, 4), (1, 4)],
    &[(1, 8), (1, 8), (1, 8), (1, 8), (1, 2)],
    &[(1, 6), (1, 6), (1, 6), (1, 2)],
];

struct Style {
    root: i32,
    scale: &'static [i32; 7],
    low: i32,
    high: i32,
    rhythms: Vec<usize>,
}

impl Style {
    fn draw(r: &mut SplitMix64) -> Self {
        let root = r.gen_range(0..12);
        let scale = if r.gen_bool(0.6) { &MAJOR } else { &MINOR };
        let low = r.gen_range(48..64);
        let mut all: Vec<usize> = (0..RHYTHMS.len()).collect();
        all.shuffle(r);
        let k = r.gen_range(2..=4);
        Style {
            root,
            scale,
            low,
            high: low + 16,
            rhythms: all[..k].to_vec(),
        }
    }

    fn pitch(&self, degree: i32) -> i32 {
        let octave = degree.div_euclid(7);
        self.root + 12 * octave + self.scale[degree.rem_euclid(7) as usize]
    }

    /// Scale degrees whose pitch lies in the register.
    fn degrees(&self) -> (i32, i32) {
        let lo = (-30..60).find(|&d| self.pitch(d) >= self.low).expect("register reachable");
        let hi = (lo..lo + 40).take_while(|&d| self.pitch(d) <= self.high).last().expect("non-empty register");
        (lo, hi)
    }
}

fn measure(style: &Style, degree: &mut i32, r: &mut SplitMix64) -> Measure {
    let (lo, hi) = style.degrees();
    let pattern = RHYTHMS[*style.rhythms.choose(r).expect("palette")];
    let notes = pattern
        .iter()
        .map(|&(n, d)| {
            let dur = Duration::new(n, d).expect("palette durations are notated values");
            if r.gen_bool(0.06) {
                return Note::rest(dur);
            }
            let step: i32 = *[-2, -1, -1, 0, 1, 1, 2, 3, -3].choose(r).expect("steps");
            *degree = (*degree + step).clamp(lo, hi);
            Note::new(Pitch::new(style.pitch(*degree)).expect("register within MIDI range"), dur)
        })
        .collect();
    Measure::new(notes, Duration::WHOLE)
}

/// One piece of `measures` bars.
pub fn piece(id: impl Into<String>, measures: usize, r: &mut SplitMix64) -> Piece {
    let style = Style::draw(r);
    let (lo, hi) = style.degrees();
    let mut degree = r.gen_range(lo..=hi);
    let mut out: Vec<Measure> = Vec::with_capacity(measures);
    for i in 0..measures {
        if i >= 2 && r.gen_bool(0.2) {
            let back = if i >= 4 && r.gen_bool(0.5) { 4 } else { 2 };
            out.push(out[i - back].clone());
            continue;
        }
        let mut m = measure(&style, &mut degree, r);
        if let Some(prev) = out.last_mut() {
            let last = prev.notes.last_mut().expect("measures are non-empty");
            if !last.pitch.is_rest() && r.gen_bool(0.15) {
                m.notes[0].pitch = last.pitch;
                m.notes[0].tie_from_prev = true;
                last.tie_to_next = true;
            }
        }
        out.push(m);
    }
    let mut p = Piece::new(id, out);
    crate::music::repair_ties(&mut p.measures);
    p
}

/// `n_pieces` pieces of `measures` bars each, reproducible from `seed`.
pub fn corpus(n_pieces: usize, measures: usize, seed: u64) -> Corpus {
    let pieces = (0..n_pieces)
        .map(|i| {
            let mut r = rng::indexed(seed, "toy", i as u64, 0);
            piece(format!("toy{i:03}"), measures, &mut r)
        })
        .collect();
    Corpus::new(pieces).expect("synthetic pieces are valid")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::music::validate_piece;

    #[test]
    fn pieces_are_valid_and_reproducible() {
        let a = corpus(20, 16, 3);
        let b = corpus(20, 16, 3);
        assert_eq!(a.pieces, b.pieces);
        for p in &a.pieces {
            assert!(validate_piece(p).is_empty(), "{:?}", validate_piece(p));
            assert_eq!(p.measures.len(), 16);
            assert!(p.notes().all(|n| n.pitch.is_rest() || (36..=92).contains(&n.pitch.value())));
        }
        assert_ne!(corpus(20, 16, 4).pieces, a.pieces);
    }
}
