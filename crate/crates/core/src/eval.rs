//! Ranking evaluation: the truth is ranked among itself and 49 random
//! library units under a chosen scoring regime.

use std::fmt;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::Corpus;
use crate::dssm::DssmModel;
use crate::error::{Error, Result};
use crate::index::EmbeddedLibrary;
use crate::lm::{LmModel, CONTEXT_LEN};
use crate::music::{Note, Unit};
use crate::nn::cosine_sim;
use crate::rng::{self, SplitMix64};
use crate::scalar::Scalar;
use crate::select::{rank_from_scores, DEFAULT_SHORTLIST_FRACTION};

pub const POOL_SIZE: usize = 50;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankSummary {
    pub probes: usize,
    pub mean_rank: f64,
    pub accuracy: f64,
    pub seed: u64,
}

impl RankSummary {
    pub fn from_ranks(ranks: &[usize], seed: u64) -> Self {
        let n = ranks.len().max(1) as f64;
        RankSummary {
            probes: ranks.len(),
            mean_rank: ranks.iter().sum::<usize>() as f64 / n,
            accuracy: ranks.iter().filter(|&&r| r == 1).count() as f64 / n,
            seed,
        }
    }
}

/// 1-based rank of `truth` after shuffling the pool and stably sorting by
/// score descending, so equal scores are ordered at random.
pub fn rank_in_shuffled_pool(scores: &[f64], truth: usize, r: &mut SplitMix64) -> usize {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.shuffle(r);
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    order.iter().position(|&i| i == truth).expect("truth is in the pool") + 1
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Regime {
    #[serde(rename = "LSTM")]
    Lstm,
    #[serde(rename = "DSSM")]
    Dssm,
    #[serde(rename = "DSSM+LSTM")]
    DssmLstm,
    /// Control: every candidate scores the same.
    #[serde(rename = "random")]
    Random,
}

impl Regime {
    pub const LEARNED: [Regime; 3] = [Regime::Lstm, Regime::Dssm, Regime::DssmLstm];

    pub fn name(self) -> &'static str {
        match self {
            Regime::Lstm => "LSTM",
            Regime::Dssm => "DSSM",
            Regime::DssmLstm => "DSSM+LSTM",
            Regime::Random => "random",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        [Regime::Lstm, Regime::Dssm, Regime::DssmLstm, Regime::Random]
            .into_iter()
            .find(|r| r.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Invalid(format!("unknown regime {s}")))
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One held-out successor: the unit before it, the unit itself, and the
/// notes preceding it in its piece (at most one context window).
#[derive(Clone, Debug, PartialEq)]
pub struct Probe {
    pub prev: Unit,
    pub truth: Unit,
    pub context: Vec<Note>,
}

/// Probes from every adjacent non-overlapping unit pair of every piece.
pub fn make_probes(c: &Corpus, unit_length: usize) -> Vec<Probe> {
    let mut out = Vec::new();
    for p in &c.pieces {
        let units = p.units(unit_length);
        let notes: Vec<Note> = p.notes().copied().collect();
        let mut before = 0;
        for w in units.windows(2) {
            before += w[0].note_count();
            out.push(Probe {
                prev: w[0].clone(),
                truth: w[1].clone(),
                context: notes[before.saturating_sub(CONTEXT_LEN)..before].to_vec(),
            });
        }
    }
    out
}

/// Models available to the harness; a regime needing an absent model is an error.
pub struct Scorers<'a, T> {
    pub dssm: Option<(&'a DssmModel<T>, &'a EmbeddedLibrary<'a, T>)>,
    pub lm: Option<&'a LmModel<T>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankingRow {
    pub regime: Regime,
    pub unit_length: usize,
    pub probes: usize,
    pub mean_rank: f64,
    pub accuracy: f64,
    pub seed: u64,
}

/// `None` stands for the truth, which need not be a library unit.
fn pool_for(lib: &crate::augment::UnitLibrary, truth: &Unit, r: &mut SplitMix64) -> Vec<Option<usize>> {
    let n = lib.len();
    let picks = match lib.position(truth) {
        Some(t) => rng::sample_excluding(r, n, t, POOL_SIZE - 1),
        None => rand::seq::index::sample(r, n, POOL_SIZE - 1).into_vec(),
    };
    std::iter::once(None).chain(picks.into_iter().map(Some)).collect()
}

/// Ranks each probe's truth among 49 seeded library distractors. The pool and
/// its tie-breaking order depend only on the seed and probe index, so every
/// regime sees the same candidates.
pub fn next_unit_ranking<T: Scalar>(
    probes: &[Probe],
    lib: &crate::augment::UnitLibrary,
    scorers: &Scorers<'_, T>,
    regime: Regime,
    seed: u64,
) -> Result<RankingRow> {
    if lib.len() < POOL_SIZE {
        return Err(Error::TooSmall(format!("library of {} units, need {POOL_SIZE}", lib.len())));
    }
    if probes.is_empty() {
        return Err(Error::TooSmall("no probes".into()));
    }
    let need_dssm = matches!(regime, Regime::Dssm | Regime::DssmLstm);
    let need_lm = matches!(regime, Regime::Lstm | Regime::DssmLstm);
    if need_dssm && scorers.dssm.is_none() {
        return Err(Error::Invalid(format!("regime {regime} needs a relevance model")));
    }
    if need_lm && scorers.lm.is_none() {
        return Err(Error::Invalid(format!("regime {regime} needs a language model")));
    }
    let ranks = probes
        .par_iter()
        .enumerate()
        .map(|(p, probe)| {
            let mut r = rng::indexed(seed, "next-unit", p as u64, 0);
            let mut pool = pool_for(lib, &probe.truth, &mut r);
            pool.shuffle(&mut r);
            let truth = pool.iter().position(|c| c.is_none()).expect("truth in pool");
            let unit = |c: &Option<usize>| c.map_or(&probe.truth, |i| lib.unit(i));
            let relevance = || -> Result<Vec<f64>> {
                let (m, emb) = scorers.dssm.expect("checked above");
                let q = m.embed(&probe.prev)?;
                pool.iter()
                    .map(|c| match c {
                        Some(i) => emb.similarity_to(&q, *i).map(|s| s.as_f64()),
                        None => cosine_sim(&q, &m.embed(&probe.truth)?).map(|s| s.as_f64()),
                    })
                    .collect()
            };
            let costs = |idx: &[usize]| -> Result<Vec<f64>> {
                let lm = scorers.lm.expect("checked above");
                let prev = lm.vocab.tokenize(&probe.context);
                let units: Vec<&Unit> = idx.iter().map(|&k| unit(&pool[k])).collect();
                lm.concat_costs(&prev, &units, 1)
            };
            let all: Vec<usize> = (0..pool.len()).collect();
            let position = match regime {
                Regime::Random => rank_in_pool_order(&vec![0.0; pool.len()], truth),
                Regime::Dssm => rank_in_pool_order(&relevance()?, truth),
                Regime::Lstm => {
                    let neg: Vec<f64> = costs(&all)?.into_iter().map(|c| -c).collect();
                    rank_in_pool_order(&neg, truth)
                }
                Regime::DssmLstm => {
                    let ranked = rank_from_scores(&relevance()?, DEFAULT_SHORTLIST_FRACTION, costs)?;
                    ranked.iter().position(|c| c.index == truth).expect("truth ranked") + 1
                }
            };
            Ok(position)
        })
        .collect::<Result<Vec<usize>>>()?;
    let s = RankSummary::from_ranks(&ranks, seed);
    Ok(RankingRow {
        regime,
        unit_length: lib.unit_length,
        probes: s.probes,
        mean_rank: s.mean_rank,
        accuracy: s.accuracy,
        seed,
    })
}

/// Rank by score descending; ties keep the (already shuffled) pool order.
fn rank_in_pool_order(scores: &[f64], truth: usize) -> usize {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.iter().position(|&i| i == truth).expect("truth is in the pool") + 1
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RankingReport {
    pub rows: Vec<RankingRow>,
}

const LENGTHS: [usize; 3] = [4, 2, 1];
const MISSING: &str = "-";

impl RankingReport {
    fn cell(&self, regime: Regime, unit_length: usize) -> Option<&RankingRow> {
        self.rows.iter().find(|r| r.regime == regime && r.unit_length == unit_length)
    }

    /// Regime by unit length grid; regimes beyond the three compared ones are
    /// listed after it.
    pub fn render_text(&self) -> String {
        let mut out = format!("{:<10} {:>7} {:>8} {:>10} {:>7}\n", "regime", "length", "acc", "mean@50", "probes");
        let mut regimes: Vec<Regime> = Regime::LEARNED.to_vec();
        for r in &self.rows {
            if !regimes.contains(&r.regime) {
                regimes.push(r.regime);
            }
        }
        for regime in regimes {
            for len in LENGTHS {
                let (acc, mean, n) = match self.cell(regime, len) {
                    Some(r) => (
                        format!("{:.1}%", 100.0 * r.accuracy),
                        format!("{:.2}", r.mean_rank),
                        r.probes.to_string(),
                    ),
                    None => (MISSING.into(), MISSING.into(), MISSING.into()),
                };
                out.push_str(&format!("{:<10} {:>7} {:>8} {:>10} {:>7}\n", regime.name(), len, acc, mean, n));
            }
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialization") + "\n"
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::Parse(e.to_string()))
    }

    /// Writes `<stem>.txt` and `<stem>.json` next to each other.
    pub fn write(&self, stem: impl AsRef<Path>) -> Result<()> {
        let stem = stem.as_ref();
        let txt = stem.with_extension("txt");
        let json = stem.with_extension("json");
        fs::write(&txt, self.render_text()).map_err(|e| Error::io(&txt, e))?;
        fs::write(&json, self.to_json()).map_err(|e| Error::io(&json, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_scores_rank_uniformly() {
        let mut r = rng::stream(5, "t");
        let scores = vec![1.0; 50];
        let ranks: Vec<usize> = (0..4000).map(|_| rank_in_shuffled_pool(&scores, 0, &mut r)).collect();
        let s = RankSummary::from_ranks(&ranks, 5);
        assert!((s.mean_rank - 25.5).abs() < 1.0, "{}", s.mean_rank);
        assert!((s.accuracy - 0.02).abs() < 0.01);
    }

    #[test]
    fn perfect_scorer_ranks_first() {
        let mut r = rng::stream(5, "t");
        let mut scores = vec![0.0; 50];
        scores[7] = 1.0;
        assert_eq!(rank_in_shuffled_pool(&scores, 7, &mut r), 1);
    }

    #[test]
    fn report_grid_and_round_trip() {
        let row = |regime, unit_length, mean_rank| RankingRow {
            regime,
            unit_length,
            probes: 10,
            mean_rank,
            accuracy: 0.25,
            seed: 1,
        };
        let rep = RankingReport {
            rows: vec![row(Regime::Dssm, 2, 4.5), row(Regime::DssmLstm, 4, 3.25)],
        };
        let text = rep.render_text();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 10);
        assert!(lines[1].starts_with("LSTM") && lines[1].contains(MISSING));
        assert!(lines[5].contains("4.50"));
        assert!(lines[7].contains("3.25") && lines[7].contains("25.0%"));
        assert_eq!(RankingReport::from_json(&rep.to_json()).unwrap(), rep);
        assert_eq!(Regime::parse("dssm+lstm").unwrap(), Regime::DssmLstm);
    }
}
