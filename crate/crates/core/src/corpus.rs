//! Line-delimited corpus files and deterministic train/test splitting.
//!
//! Each non-blank line holds one piece:
//!
//! ```text
//! {"id":"p1","meter":[1,1],"measures":[{"notes":[{"pitch":60,"dur":[1,4],"tie_prev":false,"tie_next":false}, ...]}]}
//! ```
//!
//! Rests use pitch `-1`. Tie flags may be omitted and default to `false`.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::music::{validate_piece, Duration, Measure, Note, Piece};
use crate::rng;

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub pieces: Vec<Piece>,
    pub meter: Duration,
}

#[derive(Serialize, Deserialize)]
struct WireMeasure {
    notes: Vec<Note>,
}

#[derive(Serialize, Deserialize)]
struct WirePiece {
    id: String,
    #[serde(default = "whole")]
    meter: Duration,
    measures: Vec<WireMeasure>,
}

fn whole() -> Duration {
    Duration::WHOLE
}

impl From<&Piece> for WirePiece {
    fn from(p: &Piece) -> Self {
        WirePiece {
            id: p.id.clone(),
            meter: p.meter().unwrap_or(Duration::WHOLE),
            measures: p
                .measures
                .iter()
                .map(|m| WireMeasure {
                    notes: m.notes.clone(),
                })
                .collect(),
        }
    }
}

impl From<WirePiece> for Piece {
    fn from(w: WirePiece) -> Self {
        let meter = w.meter;
        Piece::new(
            w.id,
            w.measures
                .into_iter()
                .map(|m| Measure::new(m.notes, meter))
                .collect(),
        )
    }
}

impl Corpus {
    /// Validates every piece and checks ids are unique and meters agree.
    pub fn new(pieces: Vec<Piece>) -> Result<Self> {
        if pieces.is_empty() {
            return Err(Error::TooSmall("corpus has no pieces".into()));
        }
        let mut invalid = Vec::new();
        for p in &pieces {
            let v = validate_piece(p);
            if !v.is_empty() {
                invalid.push((p.id.clone(), v));
            }
        }
        if !invalid.is_empty() {
            return Err(Error::InvalidPieces(invalid));
        }
        let mut seen = HashSet::new();
        for p in &pieces {
            if !seen.insert(p.id.as_str()) {
                return Err(Error::Parse(format!("duplicate piece id {:?}", p.id)));
            }
        }
        let meter = pieces[0].meter().expect("validated piece has measures");
        if let Some(p) = pieces.iter().find(|p| p.meter() != Some(meter)) {
            return Err(Error::Meter(format!(
                "piece {} does not share the corpus meter {meter}",
                p.id
            )));
        }
        Ok(Corpus { pieces, meter })
    }

    pub fn len(&self) -> usize {
        self.pieces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pieces.is_empty()
    }
}

pub fn parse_piece_line(line: &str) -> Result<Piece> {
    let w: WirePiece = serde_json::from_str(line).map_err(|e| Error::Parse(e.to_string()))?;
    Ok(w.into())
}

pub fn piece_to_line(p: &Piece) -> String {
    serde_json::to_string(&WirePiece::from(p)).expect("piece serialization is infallible")
}

/// Parses pieces without validating them.
pub fn parse_pieces(text: &str) -> Result<Vec<Piece>> {
    let mut pieces = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let p = parse_piece_line(line).map_err(|e| match e {
            Error::Parse(msg) => Error::Parse(format!("line {}: {msg}", i + 1)),
            other => other,
        })?;
        pieces.push(p);
    }
    if pieces.is_empty() {
        return Err(Error::Parse("no pieces found".into()));
    }
    Ok(pieces)
}

pub fn parse_corpus(text: &str) -> Result<Corpus> {
    Corpus::new(parse_pieces(text)?)
}

pub fn load_corpus(path: impl AsRef<Path>) -> Result<Corpus> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_corpus(&text)
}

pub fn render_pieces<'a>(pieces: impl IntoIterator<Item = &'a Piece>) -> String {
    let mut out = String::new();
    for p in pieces {
        out.push_str(&piece_to_line(p));
        out.push('\n');
    }
    out
}

pub fn save_pieces<'a>(path: impl AsRef<Path>, pieces: impl IntoIterator<Item = &'a Piece>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, render_pieces(pieces)).map_err(|e| Error::io(path, e))
}

pub fn save_corpus(path: impl AsRef<Path>, c: &Corpus) -> Result<()> {
    save_pieces(path, &c.pieces)
}

/// Hex SHA-256 of the corpus in canonical serialized form.
pub fn corpus_hash(c: &Corpus) -> String {
    let digest = Sha256::digest(render_pieces(&c.pieces).as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Splits by piece. The train side gets `round(n * train_fraction)` pieces,
/// clamped so both sides are non-empty; each side keeps corpus order.
pub fn split_corpus(c: &Corpus, train_fraction: f64, seed: u64) -> Result<(Corpus, Corpus)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::Invalid(format!(
            "train fraction {train_fraction} must lie in (0, 1)"
        )));
    }
    let n = c.pieces.len();
    if n < 2 {
        return Err(Error::TooSmall(format!("cannot split a corpus of {n} piece(s)")));
    }
    let n_train = ((n as f64 * train_fraction).round() as usize).clamp(1, n - 1);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, "split"));
    let mut is_train = vec![false; n];
    for &i in &order[..n_train] {
        is_train[i] = true;
    }
    let pick = |want: bool| Corpus {
        pieces: c
            .pieces
            .iter()
            .zip(&is_train)
            .filter(|(_, &t)| t == want)
            .map(|(p, _)| p.clone())
            .collect(),
        meter: c.meter,
    };
    Ok((pick(true), pick(false)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::music::Pitch;

    fn piece(id: &str, n_measures: usize) -> Piece {
        let q = Duration::new(1, 4).unwrap();
        let m = Measure::new(vec![Note::new(Pitch::midi(60), q); 4], Duration::WHOLE);
        Piece::new(id, vec![m; n_measures])
    }

    fn corpus(n: usize) -> Corpus {
        Corpus::new((0..n).map(|i| piece(&format!("p{i}"), 2)).collect()).unwrap()
    }

    #[test]
    fn split_sizes() {
        let (a, b) = split_corpus(&corpus(10), 0.6, 7).unwrap();
        assert_eq!((a.len(), b.len()), (6, 4));
        let (a2, b2) = split_corpus(&corpus(10), 0.6, 7).unwrap();
        assert_eq!(a, a2);
        assert_eq!(b, b2);
        let (a, b) = split_corpus(&corpus(2), 0.6, 1).unwrap();
        assert_eq!((a.len(), b.len()), (1, 1));
    }

    #[test]
    fn split_is_a_partition() {
        let c = corpus(17);
        for seed in 0..20 {
            let (a, b) = split_corpus(&c, 0.6, seed).unwrap();
            let mut ids: Vec<&str> = a.pieces.iter().chain(&b.pieces).map(|p| p.id.as_str()).collect();
            ids.sort();
            let mut orig: Vec<&str> = c.pieces.iter().map(|p| p.id.as_str()).collect();
            orig.sort();
            assert_eq!(ids, orig);
        }
    }

    #[test]
    fn split_errors() {
        assert!(split_corpus(&corpus(1), 0.6, 1).is_err());
        assert!(split_corpus(&corpus(5), 1.0, 1).is_err());
        assert!(split_corpus(&corpus(5), 0.0, 1).is_err());
    }

    #[test]
    fn empty_text_is_a_parse_error() {
        assert!(matches!(parse_corpus(""), Err(Error::Parse(_))));
        assert!(matches!(parse_corpus("\n  \n"), Err(Error::Parse(_))));
        assert!(matches!(parse_corpus("{not json"), Err(Error::Parse(_))));
    }

    #[test]
    fn overfull_measure_names_piece_and_measure() {
        let line = r#"{"id":"bad","meter":[1,1],"measures":[{"notes":[{"pitch":60,"dur":[1,1]}]},{"notes":[{"pitch":60,"dur":[1,1]},{"pitch":62,"dur":[1,4]}]}]}"#;
        let err = parse_corpus(line).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("bad"), "{msg}");
        assert!(msg.contains("duration-mismatch (5/4 vs meter 1/1) at m1"), "{msg}");
    }

    #[test]
    fn duplicate_ids_rejected() {
        let text = render_pieces(&[piece("a", 1), piece("a", 1)]);
        assert!(parse_corpus(&text).is_err());
    }

    #[test]
    fn lines_round_trip() {
        let c = corpus(3);
        let text = render_pieces(&c.pieces);
        assert_eq!(parse_corpus(&text).unwrap(), c);
    }
}
