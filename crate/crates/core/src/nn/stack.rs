use super::{dropout_mask, Activation, Dense, DenseCache, Params};
use crate::error::Result;
use crate::rng::SplitMix64;
use crate::scalar::Scalar;

/// Feed-forward stack of dense layers. During training, inverted dropout is
/// applied to the output of every layer except the last; the input itself is
/// never dropped.
#[derive(Clone, Debug, PartialEq)]
pub struct Stack<T> {
    pub layers: Vec<Dense<T>>,
}

#[derive(Clone, Debug)]
pub struct StackCache<T> {
    /// Input seen by each layer (after the previous layer's dropout).
    inputs: Vec<Vec<T>>,
    caches: Vec<DenseCache<T>>,
    masks: Vec<Option<Vec<T>>>,
    pub output: Vec<T>,
}

impl<T: Scalar> Stack<T> {
    pub fn new(layers: Vec<Dense<T>>) -> Self {
        Stack { layers }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("non-empty stack").outputs
    }

    /// Inference through the first `depth` layers, no dropout.
    pub fn infer_to(&self, x: &[T], depth: usize) -> Result<Vec<T>> {
        let mut h = x.to_vec();
        for l in &self.layers[..depth] {
            h = l.infer(&h)?;
        }
        Ok(h)
    }

    pub fn infer(&self, x: &[T]) -> Result<Vec<T>> {
        self.infer_to(x, self.layers.len())
    }

    /// Which side of its kink each rectifier unit sits on for input `x`.
    /// Two parameter settings with equal patterns share a smooth piece.
    pub fn kink_pattern(&self, x: &[T]) -> Result<Vec<bool>> {
        let mut h = x.to_vec();
        let mut pattern = Vec::new();
        for l in &self.layers {
            let c = l.forward(&h)?;
            if l.activation != Activation::Linear {
                pattern.extend(c.pre.iter().map(|&z| z > T::zero()));
            }
            h = c.out;
        }
        Ok(pattern)
    }

    /// Forward pass for training; `dropout` is `(keep, rng)`.
    pub fn forward(&self, x: &[T], mut dropout: Option<(f64, &mut SplitMix64)>) -> Result<StackCache<T>> {
        let n = self.layers.len();
        let mut inputs = Vec::with_capacity(n);
        let mut caches = Vec::with_capacity(n);
        let mut masks = Vec::with_capacity(n);
        let mut h = x.to_vec();
        for (k, l) in self.layers.iter().enumerate() {
            let c = l.forward(&h)?;
            let mut out = c.out.clone();
            let mask = match (&mut dropout, k + 1 < n) {
                (Some((keep, rng)), true) if *keep < 1.0 => {
                    let m = dropout_mask::<T>(out.len(), *keep, rng);
                    for (o, &s) in out.iter_mut().zip(&m) {
                        *o *= s;
                    }
                    Some(m)
                }
                _ => None,
            };
            inputs.push(std::mem::replace(&mut h, out));
            caches.push(c);
            masks.push(mask);
        }
        Ok(StackCache {
            inputs,
            caches,
            masks,
            output: h,
        })
    }

    /// Accumulates gradients for `dL/doutput` into `grads`.
    pub fn backward(&self, cache: &StackCache<T>, dout: &[T], grads: &mut Stack<T>) -> Result<()> {
        let mut d = dout.to_vec();
        for k in (0..self.layers.len()).rev() {
            if let Some(m) = &cache.masks[k] {
                for (g, &s) in d.iter_mut().zip(m) {
                    *g *= s;
                }
            }
            let dx = self.layers[k].backward(&cache.inputs[k], &cache.caches[k], &d, &mut grads.layers[k], k > 0)?;
            if let Some(dx) = dx {
                d = dx;
            }
        }
        Ok(())
    }
}

impl<T: Scalar> Params<T> for Stack<T> {
    fn params(&self) -> Vec<&[T]> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut [T]> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }
}
