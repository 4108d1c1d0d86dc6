//! Small neural toolkit with hand-written backpropagation.

mod dense;
mod gradcheck;
mod loss;
mod lstm;
mod stack;

pub use dense::{Activation, Dense, DenseCache};
pub use gradcheck::{grad_check, grad_check_extrapolated, relative_error, ridders, GradReport};
pub use loss::{
    any_zero_norm, batch_relevance_backward, cosine_backward, cosine_sim, log_softmax, softmax_relevance, softmax_relevance_backward, softmax_xent,
    RelevanceGrad,
};
pub use lstm::{Lstm, LstmCache, LstmState};
pub use stack::{Stack, StackCache};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::scalar::Scalar;

/// Anything with trainable parameters. The gradient container for a model is
/// a zeroed copy of the model itself.
pub trait Params<T: Scalar> {
    fn params(&self) -> Vec<&[T]>;
    fn params_mut(&mut self) -> Vec<&mut [T]>;

    fn zeros_like(&self) -> Self
    where
        Self: Sized + Clone,
    {
        let mut z = self.clone();
        for p in z.params_mut() {
            p.fill(T::zero());
        }
        z
    }

    fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    fn add_assign_from(&mut self, other: &Self) {
        for (a, b) in self.params_mut().into_iter().zip(other.params()) {
            for (x, &y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }
}

/// `p <- p - lr * g` over every parameter slice.
pub fn sgd_step<T: Scalar, M: Params<T>>(model: &mut M, grads: &M, lr: T) -> Result<()> {
    let g = grads.params();
    let mut p = model.params_mut();
    if p.len() != g.len() || p.iter().zip(&g).any(|(a, b)| a.len() != b.len()) {
        return Err(Error::Shape("gradient layout does not match parameters".into()));
    }
    for (ps, gs) in p.iter_mut().zip(g) {
        for (x, &d) in ps.iter_mut().zip(gs) {
            *x -= lr * d;
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Rescale the whole gradient when its L2 norm exceeds this.
    pub clip_norm: Option<f64>,
    /// Probability of keeping a hidden activation.
    pub dropout_keep: f64,
    pub negatives: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.005,
            clip_norm: None,
            dropout_keep: 0.5,
            negatives: 4,
            epochs: 10,
            batch_size: 32,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.dropout_keep > 0.0 && self.dropout_keep <= 1.0) {
            return Err(Error::Invalid(format!("dropout_keep {} not in (0, 1]", self.dropout_keep)));
        }
        if self.negatives < 1 {
            return Err(Error::Invalid("need at least one negative".into()));
        }
        if self.batch_size < 1 {
            return Err(Error::Invalid("batch size must be positive".into()));
        }
        if !(self.learning_rate >= 0.0) {
            return Err(Error::Invalid(format!("learning rate {}", self.learning_rate)));
        }
        Ok(())
    }
}

/// Gradient descent with optional clipping of the global gradient norm.
#[derive(Clone, Debug)]
pub struct Optimizer {
    lr: f64,
    clip_norm: Option<f64>,
}

impl Optimizer {
    pub fn new(cfg: &TrainConfig) -> Self {
        Optimizer {
            lr: cfg.learning_rate,
            clip_norm: cfg.clip_norm,
        }
    }

    pub fn step<T: Scalar, M: Params<T>>(&mut self, model: &mut M, grads: &mut M) -> Result<()> {
        if let Some(limit) = self.clip_norm {
            let sq: f64 = grads.params().iter().flat_map(|p| p.iter()).map(|g| g.as_f64().powi(2)).sum();
            let n = sq.sqrt();
            if n > limit {
                let s = T::of(limit / n);
                for p in grads.params_mut() {
                    for g in p.iter_mut() {
                        *g *= s;
                    }
                }
            }
        }
        sgd_step(model, grads, T::of(self.lr))
    }
}

/// Inverted-dropout mask: entries are 0 or `1 / keep`.
pub fn dropout_mask<T: Scalar>(len: usize, keep: f64, rng: &mut SplitMix64) -> Vec<T> {
    if keep >= 1.0 {
        return vec![T::one(); len];
    }
    let scale = T::of(1.0 / keep);
    (0..len)
        .map(|_| if rng.gen::<f64>() < keep { scale } else { T::zero() })
        .collect()
}

/// Fixed number of gradient partitions per batch. Members are split into this
/// many contiguous groups, each accumulated independently (possibly in
/// parallel), then summed in group order, so results never depend on the
/// thread count.
pub(crate) const GRAD_GROUPS: usize = 4;

pub(crate) fn grouped_grads<T, M, F>(model: &M, n: usize, f: F) -> Result<M>
where
    T: Scalar,
    M: Params<T> + Clone + Send + Sync,
    F: Fn(usize, &mut M) -> Result<()> + Sync,
{
    use rayon::prelude::*;
    let size = n.div_ceil(GRAD_GROUPS).max(1);
    let starts: Vec<usize> = (0..n).step_by(size).collect();
    let mut parts = starts
        .par_iter()
        .map(|&s| {
            let mut g = model.zeros_like();
            for i in s..(s + size).min(n) {
                f(i, &mut g)?;
            }
            Ok(g)
        })
        .collect::<Result<Vec<M>>>()?
        .into_iter();
    let mut total = parts.next().unwrap_or_else(|| model.zeros_like());
    for p in parts {
        total.add_assign_from(&p);
    }
    Ok(total)
}

/// Batches of example indices; a trailing batch smaller than `min` is merged into its predecessor.
pub(crate) fn batches(order: &[usize], size: usize, min: usize) -> Vec<Vec<usize>> {
    let mut out: Vec<Vec<usize>> = order.chunks(size.max(1)).map(|c| c.to_vec()).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() < min) {
        let tail = out.pop().unwrap();
        out.last_mut().unwrap().extend(tail);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    #[test]
    fn sgd_with_zero_rate_is_identity() {
        let mut rng = stream(1, "t");
        let mut d = Dense::<f64>::new(3, 2, Activation::Linear, &mut rng);
        let before = d.clone();
        let mut g = d.zeros_like();
        g.weights.fill(1.0);
        sgd_step(&mut d, &g, 0.0).unwrap();
        assert_eq!(d, before);
        sgd_step(&mut d, &g, 0.5).unwrap();
        assert!(d.weights.iter().zip(&before.weights).all(|(a, b)| (a - (b - 0.5)).abs() < 1e-15));
    }

    #[test]
    fn sgd_shape_mismatch() {
        let mut rng = stream(1, "t");
        let mut a = Dense::<f64>::new(3, 2, Activation::Linear, &mut rng);
        let b = Dense::<f64>::new(2, 2, Activation::Linear, &mut rng);
        assert!(sgd_step(&mut a, &b, 0.1).is_err());
    }

    #[test]
    fn clipping_bounds_the_step() {
        let mut rng = stream(2, "t");
        let mut d = Dense::<f64>::new(2, 1, Activation::Linear, &mut rng);
        let before = d.clone();
        let mut g = d.zeros_like();
        g.weights = vec![30.0, 40.0];
        let mut opt = Optimizer::new(&TrainConfig {
            learning_rate: 1.0,
            clip_norm: Some(5.0),
            ..Default::default()
        });
        opt.step(&mut d, &mut g).unwrap();
        assert!((d.weights[0] - (before.weights[0] - 3.0)).abs() < 1e-12);
        assert!((d.weights[1] - (before.weights[1] - 4.0)).abs() < 1e-12);
    }

    #[test]
    fn dropout_mask_scaling() {
        let mut rng = stream(3, "d");
        let m: Vec<f64> = dropout_mask(10_000, 0.5, &mut rng);
        assert!(m.iter().all(|&x| x == 0.0 || x == 2.0));
        let mean = m.iter().sum::<f64>() / m.len() as f64;
        assert!((mean - 1.0).abs() < 0.05);
        let ones: Vec<f32> = dropout_mask(5, 1.0, &mut rng);
        assert_eq!(ones, vec![1.0; 5]);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            dropout_keep: 0.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            negatives: 0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn batching_merges_short_tail() {
        let order: Vec<usize> = (0..10).collect();
        let b = batches(&order, 4, 5);
        assert_eq!(b.len(), 2);
        assert_eq!(b[1].len(), 6);
        let b = batches(&order, 5, 5);
        assert_eq!(b.len(), 2);
    }
}
