//! Generation by unit selection. Each step ranks the library by semantic
//! relevance to the previous unit, re-ranks the top of that list by
//! concatenation cost, and takes the unit with the best combined rank.

use std::cmp::Ordering;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dssm::DssmModel;
use crate::error::{Error, Result};
use crate::index::EmbeddedLibrary;
use crate::lm::{ContextWindow, LmModel, OOV, PAD};
use crate::music::{Duration, Measure, Note, Piece, Unit};
use crate::rng::{self, SplitMix64};
use crate::scalar::Scalar;

pub const DEFAULT_SHORTLIST_FRACTION: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum SelectionMode {
    Deterministic,
    Sampled { temperature: f64, seed: u64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationConfig {
    pub shortlist_fraction: f64,
    /// Notes of each candidate scored by the concatenation cost.
    pub concat_notes: usize,
    pub mode: SelectionMode,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        GenerationConfig {
            shortlist_fraction: DEFAULT_SHORTLIST_FRACTION,
            concat_notes: 1,
            mode: SelectionMode::Deterministic,
        }
    }
}

impl GenerationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.shortlist_fraction > 0.0 && self.shortlist_fraction <= 1.0) {
            return Err(Error::Invalid(format!(
                "shortlist fraction {} not in (0, 1]",
                self.shortlist_fraction
            )));
        }
        if self.concat_notes == 0 {
            return Err(Error::Invalid("concatenation cost needs at least one note".into()));
        }
        if let SelectionMode::Sampled { temperature, .. } = self.mode {
            if !(temperature > 0.0 && temperature.is_finite()) {
                return Err(Error::Invalid(format!("temperature {temperature}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankedCandidate {
    /// Position in the scored pool (library order for generation).
    pub index: usize,
    pub semantic_rank: usize,
    /// Set only for shortlisted candidates.
    pub concat_rank: Option<usize>,
    pub combined_key: Option<usize>,
}

/// `ceil(fraction * n)`, at least 1 and at most `n`.
pub fn shortlist_size(n: usize, fraction: f64) -> usize {
    let k = (fraction * n as f64 - 1e-9).ceil();
    (k.max(1.0) as usize).min(n)
}

fn desc(a: f64, b: f64) -> Ordering {
    b.total_cmp(&a)
}

/// Ranks a pool from raw relevance scores (higher is better) and a cost
/// function evaluated on the shortlist only (lower is better). Returns the
/// shortlist ordered by combined key, then everything else by semantic rank.
/// Ties break toward the better semantic rank, then the lower index.
pub fn rank_from_scores<F>(relevance: &[f64], fraction: f64, costs: F) -> Result<Vec<RankedCandidate>>
where
    F: FnOnce(&[usize]) -> Result<Vec<f64>>,
{
    if relevance.is_empty() {
        return Err(Error::TooSmall("empty candidate pool".into()));
    }
    let mut order: Vec<usize> = (0..relevance.len()).collect();
    order.sort_by(|&a, &b| desc(relevance[a], relevance[b]).then(a.cmp(&b)));
    let k = shortlist_size(order.len(), fraction);
    let shortlist = &order[..k];
    let c = costs(shortlist)?;
    if c.len() != k {
        return Err(Error::Shape(format!("{} costs for a shortlist of {k}", c.len())));
    }
    let mut by_cost: Vec<usize> = (0..k).collect();
    by_cost.sort_by(|&a, &b| c[a].total_cmp(&c[b]).then(a.cmp(&b)));
    let mut concat_rank = vec![0; k];
    for (r, &s) in by_cost.iter().enumerate() {
        concat_rank[s] = r + 1;
    }
    let mut head: Vec<RankedCandidate> = (0..k)
        .map(|s| RankedCandidate {
            index: shortlist[s],
            semantic_rank: s + 1,
            concat_rank: Some(concat_rank[s]),
            combined_key: Some(s + 1 + concat_rank[s]),
        })
        .collect();
    head.sort_by_key(|r| (r.combined_key, r.semantic_rank));
    head.extend(order[k..].iter().enumerate().map(|(s, &index)| RankedCandidate {
        index,
        semantic_rank: k + s + 1,
        concat_rank: None,
        combined_key: None,
    }));
    Ok(head)
}

/// The models and embedded library used for unit-level generation.
pub struct Selector<'a, T> {
    pub library: &'a EmbeddedLibrary<'a, T>,
    pub dssm: &'a DssmModel<T>,
    pub lm: &'a LmModel<T>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepTrace {
    pub step: usize,
    pub selected: usize,
    pub shortlist: Vec<RankedCandidate>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Generation {
    pub piece: Piece,
    pub units: Vec<usize>,
    pub trace: Vec<StepTrace>,
}

impl<'a, T: Scalar> Selector<'a, T> {
    pub fn new(library: &'a EmbeddedLibrary<'a, T>, dssm: &'a DssmModel<T>, lm: &'a LmModel<T>) -> Result<Self> {
        library.check_model(dssm)?;
        Ok(Selector { library, dssm, lm })
    }

    /// Raw relevance of every library unit to `query`.
    pub fn relevance(&self, query: &Unit) -> Result<Vec<f64>> {
        let e = self.dssm.embed(query)?;
        Ok(self.library.similarities(&e)?.into_iter().map(|s| s.as_f64()).collect())
    }

    /// Raw concatenation costs of the listed library units after `prev`.
    pub fn costs(&self, prev: &[usize], indices: &[usize], concat_notes: usize) -> Result<Vec<f64>> {
        let units: Vec<&Unit> = indices.iter().map(|&i| self.library.library.unit(i)).collect();
        let j = concat_notes.min(units.iter().map(|u| u.note_count()).min().unwrap_or(1)).max(1);
        self.lm.concat_costs(prev, &units, j)
    }

    pub fn rank_candidates(&self, query: &Unit, prev: &[usize], cfg: &GenerationConfig) -> Result<Vec<RankedCandidate>> {
        cfg.validate()?;
        let rel = self.relevance(query)?;
        rank_from_scores(&rel, cfg.shortlist_fraction, |s| self.costs(prev, s, cfg.concat_notes))
    }

    /// Appends `n_units` selected units to `seed`. The note context is the
    /// last notes of everything placed so far, across unit boundaries.
    pub fn generate(&self, seed: &Unit, n_units: usize, cfg: &GenerationConfig) -> Result<Generation> {
        let lib = self.library.library;
        if seed.len() != lib.unit_length {
            return Err(Error::Invalid(format!(
                "seed has {} measures but library units have {}",
                seed.len(),
                lib.unit_length
            )));
        }
        self.continue_measures(&seed.measures, n_units, cfg)
    }

    /// Like [`Selector::generate`] for a seed passage of any whole number of
    /// units: every seed note feeds the context and the last unit is the first query.
    pub fn continue_measures(&self, seed: &[Measure], n_units: usize, cfg: &GenerationConfig) -> Result<Generation> {
        cfg.validate()?;
        let lib = self.library.library;
        let l = lib.unit_length;
        if seed.len() < l {
            return Err(Error::Invalid(format!(
                "seed has {} measures but library units have {l}",
                seed.len()
            )));
        }
        let whole = Unit::new(seed.to_vec());
        if whole.meter() != Some(lib.meter) || seed.iter().any(|m| m.meter != lib.meter) {
            return Err(Error::Meter("seed does not use the library meter".into()));
        }
        let seed = &whole;
        let mut history = self.lm.vocab.tokenize_unit(seed);
        let mut query = Unit::new(seed.measures[seed.len() - l..].to_vec());
        let mut picks = Vec::with_capacity(n_units);
        let mut trace = Vec::with_capacity(n_units);
        let mut sampler = match cfg.mode {
            SelectionMode::Sampled { seed, .. } => Some(rng::stream(seed, "select")),
            SelectionMode::Deterministic => None,
        };
        for step in 0..n_units {
            let ranked = self.rank_candidates(&query, &history, cfg)?;
            let k = ranked.iter().take_while(|r| r.concat_rank.is_some()).count();
            let pos = match (cfg.mode, sampler.as_mut()) {
                (SelectionMode::Sampled { temperature, .. }, Some(r)) => sample_position(k, temperature, r),
                _ => 0,
            };
            let chosen = ranked[pos].index;
            let u = lib.unit(chosen);
            history.extend(self.lm.vocab.tokenize_unit(u));
            if history.len() > crate::lm::CONTEXT_LEN {
                history.drain(..history.len() - crate::lm::CONTEXT_LEN);
            }
            query = u.clone();
            picks.push(chosen);
            trace.push(StepTrace {
                step,
                selected: chosen,
                shortlist: ranked[..k].to_vec(),
            });
        }
        let units = std::iter::once(seed).chain(picks.iter().map(|&i| lib.unit(i)));
        Ok(Generation {
            piece: Piece::from_units("generated", units),
            units: picks,
            trace,
        })
    }
}

/// Position in an ordered shortlist of `k`, weighted by `exp(-position / temperature)`.
fn sample_position(k: usize, temperature: f64, r: &mut SplitMix64) -> usize {
    let w: Vec<f64> = (0..k).map(|p| (-(p as f64) / temperature).exp()).collect();
    let total: f64 = w.iter().sum();
    let mut x = r.gen::<f64>() * total;
    for (p, &wp) in w.iter().enumerate() {
        if x < wp {
            return p;
        }
        x -= wp;
    }
    k - 1
}

/// Picks a token from a next-note distribution, never PAD or OOV.
fn pick_token<T: Scalar>(dist: &[T], mode: SelectionMode, r: Option<&mut SplitMix64>) -> Option<usize> {
    let live = |t: usize| t != PAD && t != OOV;
    match (mode, r) {
        (SelectionMode::Sampled { temperature, .. }, Some(r)) => {
            let w: Vec<f64> = dist
                .iter()
                .enumerate()
                .map(|(t, p)| if live(t) && p.as_f64() > 0.0 { (p.as_f64().ln() / temperature).exp() } else { 0.0 })
                .collect();
            let total: f64 = w.iter().sum();
            if !(total > 0.0) {
                return None;
            }
            let mut x = r.gen::<f64>() * total;
            let mut last = None;
            for (t, &wt) in w.iter().enumerate() {
                if wt == 0.0 {
                    continue;
                }
                if x < wt {
                    return Some(t);
                }
                x -= wt;
                last = Some(t);
            }
            last
        }
        _ => dist
            .iter()
            .enumerate()
            .filter(|(t, _)| live(*t))
            .max_by(|a, b| a.1.as_f64().total_cmp(&b.1.as_f64()).then(b.0.cmp(&a.0)))
            .map(|(t, _)| t),
    }
}

/// Note-by-note baseline: appends `n_measures` measures to `seed`, one
/// predicted note at a time. Notes that cross a barline are split and tied
/// (rests are split without ties); the last note is cut to end the final measure.
pub fn generate_note_level<T: Scalar>(seed: &Unit, n_measures: usize, lm: &LmModel<T>, mode: SelectionMode) -> Result<Piece> {
    GenerationConfig {
        mode,
        ..Default::default()
    }
    .validate()?;
    let meter = seed
        .meter()
        .ok_or_else(|| Error::Invalid("seed unit has no measures".into()))?;
    if lm.vocab.size() <= OOV + 1 {
        return Err(Error::TooSmall("language model has no note symbols".into()));
    }
    let mut history = lm.vocab.tokenize_unit(seed);
    let mut sampler = match mode {
        SelectionMode::Sampled { seed, .. } => Some(rng::stream(seed, "notes")),
        SelectionMode::Deterministic => None,
    };
    let mut measures: Vec<Measure> = Vec::with_capacity(n_measures);
    let mut current: Vec<Note> = Vec::new();
    let mut room = meter;
    while measures.len() < n_measures {
        let dist = lm.note_distribution(&ContextWindow::from_history(&history))?;
        let tok = pick_token(&dist, mode, sampler.as_mut()).ok_or_else(|| Error::Invalid("no admissible next note".into()))?;
        let (pitch, dur) = lm.vocab.symbol(tok).expect("live tokens map to symbols");
        history.push(tok);
        let mut left = Some(dur);
        let mut tied_in = false;
        while let Some(d) = left {
            if measures.len() == n_measures {
                break;
            }
            let take: Duration = if d > room { room } else { d };
            left = d.minus(take);
            let sounding = !pitch.is_rest();
            current.push(Note {
                pitch,
                duration: take,
                tie_from_prev: sounding && tied_in,
                tie_to_next: sounding && left.is_some() && measures.len() + 1 < n_measures,
            });
            tied_in = true;
            match room.minus(take) {
                Some(r) => room = r,
                None => {
                    measures.push(Measure::new(std::mem::take(&mut current), meter));
                    room = meter;
                }
            }
        }
    }
    let mut all = seed.measures.clone();
    all.extend(measures);
    crate::music::repair_ties(&mut all);
    Ok(Piece::new("generated-notes", all))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shortlist_sizes() {
        assert_eq!(shortlist_size(100, 0.05), 5);
        assert_eq!(shortlist_size(50, 0.05), 3);
        assert_eq!(shortlist_size(60, 0.05), 3);
        assert_eq!(shortlist_size(3, 0.05), 1);
        assert_eq!(shortlist_size(10, 1.0), 10);
    }

    #[test]
    fn dominant_candidate_wins() {
        let rel = [0.1, 0.9, 0.3, 0.5];
        let r = rank_from_scores(&rel, 0.5, |s| Ok(s.iter().map(|&i| if i == 1 { 0.1 } else { 2.0 }).collect())).unwrap();
        assert_eq!(r[0].index, 1);
        assert_eq!(r[0].combined_key, Some(2));
        let mut ranks: Vec<usize> = r.iter().map(|c| c.semantic_rank).collect();
        ranks.sort();
        assert_eq!(ranks, vec![1, 2, 3, 4]);
    }

    #[test]
    fn combined_rank_breaks_ties_by_semantic_rank() {
        // semantic order 0,1,2; costs make concat order 2,0,1 -> keys 3,5,4
        let rel = [0.9, 0.8, 0.7, 0.1];
        let r = rank_from_scores(&rel, 0.75, |_| Ok(vec![0.5, 0.9, 0.1])).unwrap();
        let idx: Vec<usize> = r.iter().map(|c| c.index).collect();
        assert_eq!(idx, vec![0, 2, 1, 3]);
        // keys tie at 4 for semantic ranks 1 and 3 with concat ranks 3 and 1
        let r = rank_from_scores(&rel, 0.75, |_| Ok(vec![0.9, 0.5, 0.1])).unwrap();
        assert_eq!(r[0].index, 0);
        assert!(r[3].concat_rank.is_none());
    }

    #[test]
    fn greedy_pick_skips_reserved_tokens() {
        let d = [0.5, 0.3, 0.1, 0.1];
        assert_eq!(pick_token(&d, SelectionMode::Deterministic, None), Some(2));
        let mut r = rng::stream(1, "t");
        let mode = SelectionMode::Sampled {
            temperature: 1.0,
            seed: 1,
        };
        for _ in 0..50 {
            let t = pick_token(&d, mode, Some(&mut r)).unwrap();
            assert!(t == 2 || t == 3);
        }
    }
}
