//! Note-level LSTM language model. It scores how well a unit's opening notes
//! follow the notes already placed (the concatenation cost) and drives the
//! note-by-note generation baseline.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::archive::{ModelArchive, ModelKind, VocabSnapshot};
use crate::error::{Error, Result};
use crate::music::{Duration, Note, Piece, Pitch, Unit};
use crate::nn::{grouped_grads, log_softmax, softmax_xent, Activation, Dense, DenseCache, Lstm, LstmCache, Optimizer, Params, TrainConfig};
use crate::rng;
use crate::scalar::Scalar;

/// Tokens of context the model conditions on.
pub const CONTEXT_LEN: usize = 36;
pub const PAD: usize = 0;
pub const OOV: usize = 1;
const FIRST_SYMBOL: usize = 2;

/// `(pitch, duration)` symbols seen in training, sorted. Token ids are
/// `PAD`, `OOV`, then the symbols in order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NoteVocabulary {
    symbols: Vec<(Pitch, Duration)>,
}

impl NoteVocabulary {
    pub fn from_pieces<'a>(pieces: impl IntoIterator<Item = &'a Piece>) -> Self {
        let mut symbols: Vec<(Pitch, Duration)> = pieces
            .into_iter()
            .flat_map(|p| p.notes().map(|n| (n.pitch, n.duration)))
            .collect();
        symbols.sort_unstable();
        symbols.dedup();
        NoteVocabulary { symbols }
    }

    /// Token count including PAD and OOV.
    pub fn size(&self) -> usize {
        self.symbols.len() + FIRST_SYMBOL
    }

    pub fn token(&self, n: &Note) -> usize {
        self.symbols
            .binary_search(&(n.pitch, n.duration))
            .map_or(OOV, |i| i + FIRST_SYMBOL)
    }

    pub fn symbol(&self, token: usize) -> Option<(Pitch, Duration)> {
        token.checked_sub(FIRST_SYMBOL).and_then(|i| self.symbols.get(i).copied())
    }

    pub fn tokenize<'a>(&self, notes: impl IntoIterator<Item = &'a Note>) -> Vec<usize> {
        notes.into_iter().map(|n| self.token(n)).collect()
    }

    pub fn tokenize_piece(&self, p: &Piece) -> Vec<usize> {
        self.tokenize(p.notes())
    }

    pub fn tokenize_unit(&self, u: &Unit) -> Vec<usize> {
        self.tokenize(u.notes())
    }

    /// Inverse of tokenization; `None` if any token is PAD, OOV or unknown.
    pub fn detokenize(&self, tokens: &[usize]) -> Option<Vec<(Pitch, Duration)>> {
        tokens.iter().map(|&t| self.symbol(t)).collect()
    }

    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("vocabulary serialization is infallible");
        Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Exactly `CONTEXT_LEN` tokens, left-padded with PAD.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ContextWindow(Vec<usize>);

impl ContextWindow {
    /// The window over the last `CONTEXT_LEN` tokens of `history`.
    pub fn from_history(history: &[usize]) -> Self {
        let tail = &history[history.len().saturating_sub(CONTEXT_LEN)..];
        let mut w = vec![PAD; CONTEXT_LEN - tail.len()];
        w.extend_from_slice(tail);
        ContextWindow(w)
    }

    pub fn empty() -> Self {
        ContextWindow(vec![PAD; CONTEXT_LEN])
    }

    pub fn tokens(&self) -> &[usize] {
        &self.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LmShape {
    pub hidden: usize,
    pub layers: usize,
    /// Distance between the starts of consecutive training windows.
    pub stride: usize,
}

impl Default for LmShape {
    fn default() -> Self {
        LmShape {
            hidden: 128,
            layers: 2,
            stride: CONTEXT_LEN / 2,
        }
    }
}

/// Trainable part of the language model: stacked LSTMs over one-hot tokens
/// and a linear projection to vocabulary logits.
#[derive(Clone, Debug, PartialEq)]
pub struct LmNet<T> {
    pub lstms: Vec<Lstm<T>>,
    pub output: Dense<T>,
}

struct Trace<T> {
    lstm: Vec<LstmCache<T>>,
    output: Vec<DenseCache<T>>,
}

impl<T: Scalar> LmNet<T> {
    pub fn new(vocab_size: usize, hidden: usize, layers: usize, seed: u64) -> Self {
        let mut r = rng::stream(seed, "lm-init");
        let lstms = (0..layers.max(1))
            .map(|k| Lstm::new(if k == 0 { vocab_size } else { hidden }, hidden, &mut r))
            .collect();
        LmNet {
            lstms,
            output: Dense::new(hidden, vocab_size, Activation::Linear, &mut r),
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.output.outputs
    }

    fn one_hot(&self, tokens: &[usize]) -> Result<Vec<Vec<T>>> {
        let v = self.vocab_size();
        tokens
            .iter()
            .map(|&t| {
                if t >= v {
                    return Err(Error::Shape(format!("token {t} outside a vocabulary of {v}")));
                }
                let mut x = vec![T::zero(); v];
                x[t] = T::one();
                Ok(x)
            })
            .collect()
    }

    fn trace(&self, inputs: &[usize]) -> Result<Trace<T>> {
        let mut xs = self.one_hot(inputs)?;
        let mut lstm = Vec::with_capacity(self.lstms.len());
        for l in &self.lstms {
            let c = l.forward_seq(&xs)?;
            xs = c.outputs.clone();
            lstm.push(c);
        }
        let output = xs.iter().map(|h| self.output.forward(h)).collect::<Result<Vec<_>>>()?;
        Ok(Trace { lstm, output })
    }

    /// Logits after the last input token.
    pub fn final_logits(&self, inputs: &[usize]) -> Result<Vec<T>> {
        let t = self.trace(inputs)?;
        Ok(t.output.last().map(|c| c.out.clone()).unwrap_or_default())
    }

    /// Summed next-token log-loss; `targets[t]` is predicted after `inputs[..=t]`
    /// and PAD targets are skipped.
    pub fn sequence_loss(&self, inputs: &[usize], targets: &[usize]) -> Result<T> {
        let t = self.trace(inputs)?;
        Ok(targets
            .iter()
            .zip(&t.output)
            .filter(|(&y, _)| y != PAD)
            .map(|(&y, c)| softmax_xent(&c.out, y, Some(PAD)).0)
            .sum())
    }

    /// Accumulates gradients of `sequence_loss` into `grads`; returns the loss.
    pub fn sequence_backward(&self, inputs: &[usize], targets: &[usize], grads: &mut LmNet<T>) -> Result<T> {
        if inputs.len() != targets.len() {
            return Err(Error::Shape("inputs and targets differ in length".into()));
        }
        let tr = self.trace(inputs)?;
        let top = &tr.lstm.last().expect("at least one layer").outputs;
        let hidden = self.output.inputs;
        let mut loss = T::zero();
        let mut dh = vec![vec![T::zero(); hidden]; inputs.len()];
        for (t, &y) in targets.iter().enumerate() {
            if y == PAD {
                continue;
            }
            let (l, dlogits) = softmax_xent(&tr.output[t].out, y, Some(PAD));
            loss += l;
            let dlogits: Vec<T> = dlogits.into_iter().map(|d| if d.is_finite() { d } else { T::zero() }).collect();
            if let Some(dx) = self.output.backward(&top[t], &tr.output[t], &dlogits, &mut grads.output, true)? {
                dh[t] = dx;
            }
        }
        for k in (0..self.lstms.len()).rev() {
            let dx = self.lstms[k].backward_seq(&tr.lstm[k], &dh, &mut grads.lstms[k], k > 0)?;
            if let Some(dx) = dx {
                dh = dx;
            }
        }
        Ok(loss)
    }
}

impl<T: Scalar> Params<T> for LmNet<T> {
    fn params(&self) -> Vec<&[T]> {
        let mut v: Vec<&[T]> = self.lstms.iter().flat_map(|l| l.params()).collect();
        v.extend(self.output.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut [T]> {
        let mut v: Vec<&mut [T]> = self.lstms.iter_mut().flat_map(|l| l.params_mut()).collect();
        v.extend(self.output.params_mut());
        v
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LmModel<T> {
    pub net: LmNet<T>,
    pub vocab: NoteVocabulary,
    vocab_hash: String,
    /// Training-set perplexity before training and after each epoch.
    pub perplexity_history: Vec<f64>,
}

/// Fixed-length training windows cut from one PAD-prefixed token stream.
/// Windows overlap, so a target already scored by an earlier window is
/// replaced by PAD and skipped.
fn windows(tokens: &[usize], stride: usize) -> Vec<(Vec<usize>, Vec<usize>)> {
    if tokens.is_empty() {
        return Vec::new();
    }
    let mut s = vec![PAD; CONTEXT_LEN];
    s.extend_from_slice(tokens);
    let last = s.len() - CONTEXT_LEN - 1;
    let mut starts: Vec<usize> = (0..=last).step_by(stride.max(1)).collect();
    if starts.last() != Some(&last) {
        starts.push(last);
    }
    let mut covered = 0;
    starts
        .into_iter()
        .map(|i| {
            let y = (i + 1..=i + CONTEXT_LEN)
                .map(|k| if k > covered { s[k] } else { PAD })
                .collect();
            covered = i + CONTEXT_LEN;
            (s[i..i + CONTEXT_LEN].to_vec(), y)
        })
        .collect()
}

impl<T: Scalar> LmModel<T> {
    pub fn init(vocab: NoteVocabulary, shape: &LmShape, seed: u64) -> Self {
        let net = LmNet::new(vocab.size(), shape.hidden, shape.layers, seed);
        let vocab_hash = vocab.hash();
        LmModel {
            net,
            vocab,
            vocab_hash,
            perplexity_history: Vec::new(),
        }
    }

    pub fn vocab_hash(&self) -> &str {
        &self.vocab_hash
    }

    /// `Pr(next token | ctx)` with PAD at probability zero.
    pub fn note_distribution(&self, ctx: &ContextWindow) -> Result<Vec<T>> {
        let logits = self.net.final_logits(ctx.tokens())?;
        Ok(log_softmax(&logits, Some(PAD)).into_iter().map(|l| l.exp()).collect())
    }

    /// `-(1/J) sum_j log Pr(x_j | window ending just before x_j)` over the
    /// first `j` notes of `u`, where the windows run over `prev` followed by
    /// the unit's own notes. An out-of-vocabulary note costs `-log Pr(OOV)`.
    pub fn concat_cost(&self, prev: &[usize], u: &Unit, j: usize) -> Result<f64> {
        let toks = self.vocab.tokenize_unit(u);
        if toks.is_empty() {
            return Err(Error::Invalid("unit has no notes".into()));
        }
        if j == 0 || j > toks.len() {
            return Err(Error::Invalid(format!("J = {j} with a unit of {} notes", toks.len())));
        }
        let mut history = prev.to_vec();
        let mut total = 0.0;
        for &t in &toks[..j] {
            let p = self.note_distribution(&ContextWindow::from_history(&history))?;
            total += -p[t].as_f64().ln();
            history.push(t);
        }
        Ok((total / j as f64).max(0.0))
    }

    /// Concatenation costs of many candidates after the same context. With
    /// `j == 1` one distribution serves every candidate.
    pub fn concat_costs(&self, prev: &[usize], units: &[&Unit], j: usize) -> Result<Vec<f64>> {
        if j != 1 {
            return units.par_iter().map(|u| self.concat_cost(prev, u, j)).collect();
        }
        let p = self.note_distribution(&ContextWindow::from_history(prev))?;
        units
            .iter()
            .map(|u| {
                let first = u.notes().next().ok_or_else(|| Error::Invalid("unit has no notes".into()))?;
                Ok((-p[self.vocab.token(first)].as_f64().ln()).max(0.0))
            })
            .collect()
    }

    pub fn to_archive(&self) -> ModelArchive {
        let mut dims = vec![self.net.vocab_size()];
        dims.extend(self.net.lstms.iter().map(|l| l.hidden));
        dims.push(self.net.vocab_size());
        let mut a = ModelArchive::new::<T>(ModelKind::Lstm, dims, VocabSnapshot::Notes(self.vocab.clone()));
        for (k, l) in self.net.lstms.iter().enumerate() {
            a.push_lstm(&format!("lstm{k}"), l);
        }
        a.push_dense("output", &self.net.output);
        a.set("layers", self.net.lstms.len());
        a.set("context_len", CONTEXT_LEN);
        a.set("perplexity_history", &self.perplexity_history);
        a
    }

    pub fn from_archive(a: &ModelArchive) -> Result<Self> {
        a.validate()?;
        a.expect_kind(ModelKind::Lstm)?;
        let VocabSnapshot::Notes(vocab) = &a.vocabulary else {
            return Err(Error::Parse("language-model archive holds a feature vocabulary".into()));
        };
        let layers: usize = a.get("layers")?;
        let context: usize = a.get("context_len")?;
        if context != CONTEXT_LEN {
            return Err(Error::Invalid(format!("archive context length {context}, expected {CONTEXT_LEN}")));
        }
        let lstms = (0..layers).map(|k| a.read_lstm(&format!("lstm{k}"))).collect::<Result<Vec<Lstm<T>>>>()?;
        let output: Dense<T> = a.read_dense("output")?;
        let v = vocab.size();
        let chained = lstms.first().is_some_and(|l| l.inputs == v)
            && lstms.windows(2).all(|w| w[1].inputs == w[0].hidden)
            && lstms.last().is_some_and(|l| l.hidden == output.inputs)
            && output.outputs == v;
        if !chained {
            return Err(Error::Shape("language-model layers do not chain".into()));
        }
        Ok(LmModel {
            net: LmNet { lstms, output },
            vocab: vocab.clone(),
            vocab_hash: a.vocab_hash.clone(),
            perplexity_history: a.get("perplexity_history")?,
        })
    }
}

fn perplexity<T: Scalar>(net: &LmNet<T>, data: &[(Vec<usize>, Vec<usize>)], scored: usize) -> Result<f64> {
    let total = data
        .par_iter()
        .map(|(x, y)| net.sequence_loss(x, y).map(|l| l.as_f64()))
        .collect::<Result<Vec<f64>>>()?
        .iter()
        .sum::<f64>();
    Ok((total / scored as f64).exp())
}

/// Teacher-forced next-note training over sliding windows of every piece.
pub fn train_lm<T: Scalar>(pieces: &[Piece], vocab: &NoteVocabulary, shape: &LmShape, cfg: &TrainConfig) -> Result<LmModel<T>> {
    cfg.validate()?;
    let data: Vec<(Vec<usize>, Vec<usize>)> = pieces
        .iter()
        .flat_map(|p| windows(&vocab.tokenize_piece(p), shape.stride))
        .collect();
    let scored: usize = data.iter().map(|(_, y)| y.iter().filter(|&&t| t != PAD).count()).sum();
    if scored < 2 {
        return Err(Error::TooSmall("empty token stream".into()));
    }
    let mut model = LmModel::<T>::init(vocab.clone(), shape, cfg.seed);
    model.perplexity_history.push(perplexity(&model.net, &data, scored)?);
    let mut opt = Optimizer::new(cfg);
    let mut shuffle_rng = rng::stream(cfg.seed, "lm-shuffle");
    for _ in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut shuffle_rng);
        for batch in order.chunks(cfg.batch_size) {
            let net = &model.net;
            let mut grads = grouped_grads(net, batch.len(), |b, g| {
                let (x, y) = &data[batch[b]];
                net.sequence_backward(x, y, g).map(|_| ())
            })?;
            opt.step(&mut model.net, &mut grads)?;
        }
        model.perplexity_history.push(perplexity(&model.net, &data, scored)?);
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::music::Measure;
    use crate::nn::grad_check;
    use crate::toy;

    fn quarters(p: u8) -> Measure {
        let q = Duration::new(1, 4).unwrap();
        Measure::new(vec![Note::new(Pitch::midi(p), q); 4], Duration::WHOLE)
    }

    fn small_shape() -> LmShape {
        LmShape {
            hidden: 12,
            layers: 2,
            stride: 18,
        }
    }

    #[test]
    fn tokenize_examples() {
        let p = Piece::new("a", vec![quarters(60), Measure::empty(Duration::WHOLE)]);
        let v = NoteVocabulary::from_pieces([&p]);
        assert_eq!(v.size(), 4);
        let t = v.tokenize_piece(&p);
        assert_eq!(t.len(), 5);
        assert!(t[..4].iter().all(|&x| x == t[0]));
        assert_eq!(v.symbol(t[4]), Some((Pitch::REST, Duration::WHOLE)));
        let unseen = Note::new(Pitch::midi(61), Duration::WHOLE);
        assert_eq!(v.token(&unseen), OOV);
    }

    #[test]
    fn detokenize_round_trip() {
        let c = toy::corpus(3, 6, 11);
        let v = NoteVocabulary::from_pieces(&c.pieces);
        for p in &c.pieces {
            let toks = v.tokenize_piece(p);
            assert_eq!(toks.len(), p.notes().count());
            let back = v.detokenize(&toks).unwrap();
            let orig: Vec<_> = p.notes().map(|n| (n.pitch, n.duration)).collect();
            assert_eq!(back, orig);
        }
        assert_eq!(v.detokenize(&[PAD]), None);
    }

    #[test]
    fn context_window_padding() {
        let w = ContextWindow::from_history(&[5, 6, 7]);
        assert_eq!(w.tokens().len(), CONTEXT_LEN);
        assert!(w.tokens()[..33].iter().all(|&t| t == PAD));
        assert_eq!(&w.tokens()[33..], &[5, 6, 7]);
        let long: Vec<usize> = (0..50).collect();
        assert_eq!(ContextWindow::from_history(&long).tokens(), &long[14..]);
    }

    #[test]
    fn windows_cover_every_target() {
        let toks: Vec<usize> = (2..60).collect();
        let w = windows(&toks, 18);
        let mut seen: Vec<usize> = w.iter().flat_map(|(_, y)| y.iter().copied()).filter(|&t| t != PAD).collect();
        seen.sort();
        assert_eq!(seen, toks);
        for (x, y) in &w {
            assert_eq!((x.len(), y.len()), (CONTEXT_LEN, CONTEXT_LEN));
            assert!((0..CONTEXT_LEN - 1).all(|t| y[t] == PAD || y[t] == x[t + 1]));
        }
    }

    #[test]
    fn distribution_is_valid() {
        let c = toy::corpus(2, 4, 1);
        let v = NoteVocabulary::from_pieces(&c.pieces);
        let m = LmModel::<f64>::init(v, &small_shape(), 3);
        let d = m.note_distribution(&ContextWindow::empty()).unwrap();
        assert!((d.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert_eq!(d[PAD], 0.0);
        let ctx = ContextWindow::from_history(&[2, 3, 4]);
        assert_eq!(m.note_distribution(&ctx).unwrap(), m.note_distribution(&ctx).unwrap());
    }

    #[test]
    fn sequence_gradients_match_finite_differences() {
        let net = LmNet::<f64>::new(7, 5, 2, 9);
        let x = [0, 0, 3, 4, 2, 6];
        let y = [0, 3, 4, 2, 6, 5];
        let mut g = net.zeros_like();
        net.sequence_backward(&x, &y, &mut g).unwrap();
        let err = grad_check(&net, &g, |m: &LmNet<f64>| m.sequence_loss(&x, &y).unwrap(), 1e-5, 400, 1);
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn concat_cost_matches_distributions() {
        let c = toy::corpus(2, 4, 5);
        let v = NoteVocabulary::from_pieces(&c.pieces);
        let m = LmModel::<f64>::init(v.clone(), &small_shape(), 4);
        let u = &c.pieces[1].units(1)[0];
        let prev = v.tokenize_piece(&c.pieces[0]);
        let toks = v.tokenize_unit(u);
        let mut hist = prev.clone();
        let mut expect = 0.0;
        for &t in toks.iter().take(3) {
            expect -= m.note_distribution(&ContextWindow::from_history(&hist)).unwrap()[t].ln();
            hist.push(t);
        }
        let got = m.concat_cost(&prev, u, 3).unwrap();
        assert!((got - expect / 3.0).abs() < 1e-12);
        let one = m.concat_cost(&prev, u, 1).unwrap();
        assert_eq!(m.concat_costs(&prev, &[u], 1).unwrap()[0], one);
        assert!(m.concat_cost(&prev, u, 0).is_err());
        assert!(m.concat_cost(&prev, u, toks.len() + 1).is_err());
    }

    #[test]
    fn single_note_corpus_is_learned() {
        let p = Piece::new("rep", vec![quarters(64); 12]);
        let v = NoteVocabulary::from_pieces([&p]);
        let cfg = TrainConfig {
            learning_rate: 0.05,
            epochs: 30,
            batch_size: 4,
            ..Default::default()
        };
        let m = train_lm::<f64>(std::slice::from_ref(&p), &v, &small_shape(), &cfg).unwrap();
        let tok = v.tokenize_piece(&p)[0];
        let d = m.note_distribution(&ContextWindow::from_history(&[tok; 10])).unwrap();
        assert!(d[tok] >= 0.99, "{}", d[tok]);
        let h = &m.perplexity_history;
        assert!(h.last().unwrap() < &h[0]);
    }

    #[test]
    fn zero_rate_and_determinism() {
        let c = toy::corpus(2, 4, 8);
        let v = NoteVocabulary::from_pieces(&c.pieces);
        let frozen = TrainConfig {
            learning_rate: 0.0,
            epochs: 2,
            ..Default::default()
        };
        let m = train_lm::<f64>(&c.pieces, &v, &small_shape(), &frozen).unwrap();
        assert!(m.perplexity_history.windows(2).all(|w| w[0] == w[1]));
        let cfg = TrainConfig {
            epochs: 2,
            ..Default::default()
        };
        let a = train_lm::<f64>(&c.pieces, &v, &small_shape(), &cfg).unwrap();
        let b = train_lm::<f64>(&c.pieces, &v, &small_shape(), &cfg).unwrap();
        assert_eq!(a, b);
        assert!(train_lm::<f64>(&[], &v, &small_shape(), &cfg).is_err());
    }

    #[test]
    fn archive_round_trip() {
        let c = toy::corpus(2, 4, 8);
        let v = NoteVocabulary::from_pieces(&c.pieces);
        let m = LmModel::<f32>::init(v, &small_shape(), 2);
        let bytes = m.to_archive().to_bytes();
        let back = LmModel::<f32>::from_archive(&ModelArchive::from_bytes(&bytes).unwrap()).unwrap();
        assert_eq!(back, m);
    }
}
