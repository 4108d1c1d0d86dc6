use rand::Rng;

use super::dense::nonzeros;
use super::Params;
use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::scalar::Scalar;

/// One LSTM layer. Gate pre-activations are `W [x; h_prev] + b` with `W`
/// row-major `[4H x (inputs + H)]`, gate blocks ordered input, forget, output, candidate.
#[derive(Clone, Debug, PartialEq)]
pub struct Lstm<T> {
    pub inputs: usize,
    pub hidden: usize,
    pub weights: Vec<T>,
    pub bias: Vec<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LstmState<T> {
    pub h: Vec<T>,
    pub c: Vec<T>,
}

impl<T: Scalar> LstmState<T> {
    pub fn zeros(hidden: usize) -> Self {
        LstmState {
            h: vec![T::zero(); hidden],
            c: vec![T::zero(); hidden],
        }
    }
}

#[derive(Clone, Debug)]
struct Step<T> {
    /// Non-zero entries of `[x; h_prev]`.
    input: Vec<(usize, T)>,
    i: Vec<T>,
    f: Vec<T>,
    o: Vec<T>,
    g: Vec<T>,
    c_prev: Vec<T>,
    c: Vec<T>,
}

/// Everything the backward pass needs from a forward run over a sequence.
#[derive(Clone, Debug)]
pub struct LstmCache<T> {
    steps: Vec<Step<T>>,
    pub outputs: Vec<Vec<T>>,
}

#[inline]
fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

impl<T: Scalar> Lstm<T> {
    /// Glorot-uniform weights; forget-gate bias starts at one.
    pub fn new(inputs: usize, hidden: usize, rng: &mut SplitMix64) -> Self {
        let cols = inputs + hidden;
        let limit = (6.0 / (cols + hidden) as f64).sqrt();
        let weights = (0..4 * hidden * cols)
            .map(|_| T::of(rng.gen_range(-limit..limit)))
            .collect();
        let mut bias = vec![T::zero(); 4 * hidden];
        for b in &mut bias[hidden..2 * hidden] {
            *b = T::one();
        }
        Lstm {
            inputs,
            hidden,
            weights,
            bias,
        }
    }

    pub fn from_parts(inputs: usize, hidden: usize, weights: Vec<T>, bias: Vec<T>) -> Result<Self> {
        if weights.len() != 4 * hidden * (inputs + hidden) || bias.len() != 4 * hidden {
            return Err(Error::Shape(format!(
                "lstm {inputs}->{hidden} given {} weights and {} biases",
                weights.len(),
                bias.len()
            )));
        }
        Ok(Lstm {
            inputs,
            hidden,
            weights,
            bias,
        })
    }

    fn cols(&self) -> usize {
        self.inputs + self.hidden
    }

    fn step_inner(&self, x: &[T], prev: &LstmState<T>) -> Result<Step<T>> {
        if x.len() != self.inputs {
            return Err(Error::Shape(format!("lstm expects {} inputs, got {}", self.inputs, x.len())));
        }
        let h = self.hidden;
        let cols = self.cols();
        let mut input = nonzeros(x);
        input.extend(nonzeros(&prev.h).into_iter().map(|(j, v)| (j + self.inputs, v)));
        let mut a = self.bias.clone();
        for (r, z) in a.iter_mut().enumerate() {
            let row = &self.weights[r * cols..(r + 1) * cols];
            let mut acc = T::zero();
            for &(j, v) in &input {
                acc += row[j] * v;
            }
            *z += acc;
        }
        let i: Vec<T> = a[..h].iter().map(|&v| sigmoid(v)).collect();
        let f: Vec<T> = a[h..2 * h].iter().map(|&v| sigmoid(v)).collect();
        let o: Vec<T> = a[2 * h..3 * h].iter().map(|&v| sigmoid(v)).collect();
        let g: Vec<T> = a[3 * h..].iter().map(|&v| v.tanh()).collect();
        let c: Vec<T> = (0..h).map(|k| f[k] * prev.c[k] + i[k] * g[k]).collect();
        Ok(Step {
            input,
            i,
            f,
            o,
            g,
            c_prev: prev.c.clone(),
            c,
        })
    }

    pub fn step(&self, x: &[T], prev: &LstmState<T>) -> Result<LstmState<T>> {
        let s = self.step_inner(x, prev)?;
        let h = (0..self.hidden).map(|k| s.o[k] * s.c[k].tanh()).collect();
        Ok(LstmState { h, c: s.c })
    }

    /// Runs from the zero state, keeping what backward needs.
    pub fn forward_seq<V: AsRef<[T]>>(&self, xs: &[V]) -> Result<LstmCache<T>> {
        let mut state = LstmState::zeros(self.hidden);
        let mut steps = Vec::with_capacity(xs.len());
        let mut outputs = Vec::with_capacity(xs.len());
        for x in xs {
            let s = self.step_inner(x.as_ref(), &state)?;
            let h: Vec<T> = (0..self.hidden).map(|k| s.o[k] * s.c[k].tanh()).collect();
            state = LstmState { h: h.clone(), c: s.c.clone() };
            outputs.push(h);
            steps.push(s);
        }
        Ok(LstmCache { steps, outputs })
    }

    /// Backpropagation through time. `dh[t]` is the loss gradient flowing into
    /// the output at step `t`. Returns per-step input gradients when requested.
    pub fn backward_seq(
        &self,
        cache: &LstmCache<T>,
        dh: &[Vec<T>],
        grads: &mut Lstm<T>,
        want_dx: bool,
    ) -> Result<Option<Vec<Vec<T>>>> {
        if dh.len() != cache.steps.len() {
            return Err(Error::Shape("lstm backward length".into()));
        }
        let h = self.hidden;
        let cols = self.cols();
        let mut dh_next = vec![T::zero(); h];
        let mut dc_next = vec![T::zero(); h];
        let mut dxs = if want_dx {
            vec![vec![T::zero(); self.inputs]; cache.steps.len()]
        } else {
            Vec::new()
        };
        let mut da = vec![T::zero(); 4 * h];
        for t in (0..cache.steps.len()).rev() {
            let s = &cache.steps[t];
            if dh[t].len() != h {
                return Err(Error::Shape("lstm dh width".into()));
            }
            for k in 0..h {
                let dhk = dh[t][k] + dh_next[k];
                let tc = s.c[k].tanh();
                let d_o = dhk * tc;
                let dc = dhk * s.o[k] * (T::one() - tc * tc) + dc_next[k];
                let di = dc * s.g[k];
                let dg = dc * s.i[k];
                let df = dc * s.c_prev[k];
                dc_next[k] = dc * s.f[k];
                da[k] = di * s.i[k] * (T::one() - s.i[k]);
                da[h + k] = df * s.f[k] * (T::one() - s.f[k]);
                da[2 * h + k] = d_o * s.o[k] * (T::one() - s.o[k]);
                da[3 * h + k] = dg * (T::one() - s.g[k] * s.g[k]);
            }
            for (r, &d) in da.iter().enumerate() {
                if d == T::zero() {
                    continue;
                }
                grads.bias[r] += d;
                let row = &mut grads.weights[r * cols..(r + 1) * cols];
                for &(j, v) in &s.input {
                    row[j] += d * v;
                }
            }
            let mut dcat = vec![T::zero(); cols];
            let start = if want_dx { 0 } else { self.inputs };
            for (r, &d) in da.iter().enumerate() {
                if d == T::zero() {
                    continue;
                }
                let row = &self.weights[r * cols..(r + 1) * cols];
                for j in start..cols {
                    dcat[j] += row[j] * d;
                }
            }
            dh_next.copy_from_slice(&dcat[self.inputs..]);
            if want_dx {
                dxs[t].copy_from_slice(&dcat[..self.inputs]);
            }
        }
        Ok(want_dx.then_some(dxs))
    }
}

impl<T: Scalar> Params<T> for Lstm<T> {
    fn params(&self) -> Vec<&[T]> {
        vec![&self.weights, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut [T]> {
        vec![&mut self.weights, &mut self.bias]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    #[test]
    fn step_matches_sequence_forward() {
        let l = Lstm::<f64>::new(3, 4, &mut stream(5, "l"));
        let xs = vec![vec![1.0, 0.0, 0.0], vec![0.0, 0.5, -1.0], vec![0.0, 0.0, 1.0]];
        let cache = l.forward_seq(&xs).unwrap();
        let mut s = LstmState::zeros(4);
        for (x, out) in xs.iter().zip(&cache.outputs) {
            s = l.step(x, &s).unwrap();
            assert_eq!(&s.h, out);
        }
    }

    #[test]
    fn shape_checks() {
        let l = Lstm::<f64>::new(3, 2, &mut stream(5, "l"));
        assert!(l.step(&[1.0], &LstmState::zeros(2)).is_err());
        assert!(Lstm::<f64>::from_parts(3, 2, vec![0.0; 3], vec![0.0; 8]).is_err());
    }

    #[test]
    fn forget_bias_starts_at_one() {
        let l = Lstm::<f32>::new(2, 3, &mut stream(5, "l"));
        assert_eq!(&l.bias[3..6], &[1.0, 1.0, 1.0]);
        assert!(l.bias[..3].iter().chain(&l.bias[6..]).all(|&b| b == 0.0));
    }
}
