use rand::Rng;
use serde::{Deserialize, Serialize};

use super::Params;
use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    LeakyRelu(f64),
    Relu,
    Linear,
}

impl Activation {
    pub const LEAKY_DEFAULT: Activation = Activation::LeakyRelu(0.001);

    #[inline]
    pub fn apply<T: Scalar>(self, z: T) -> T {
        match self {
            Activation::LeakyRelu(a) => {
                if z > T::zero() {
                    z
                } else {
                    z * T::of(a)
                }
            }
            Activation::Relu => z.max(T::zero()),
            Activation::Linear => z,
        }
    }

    #[inline]
    pub fn derivative<T: Scalar>(self, z: T) -> T {
        match self {
            Activation::LeakyRelu(a) => {
                if z > T::zero() {
                    T::one()
                } else {
                    T::of(a)
                }
            }
            Activation::Relu => {
                if z > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::Linear => T::one(),
        }
    }
}

/// Fully connected layer, `y = act(W x + b)` with `W` stored row-major `[outputs x inputs]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense<T> {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<T>,
    pub bias: Vec<T>,
    pub activation: Activation,
}

#[derive(Clone, Debug)]
pub struct DenseCache<T> {
    pub pre: Vec<T>,
    pub out: Vec<T>,
}

pub(crate) fn nonzeros<T: Scalar>(x: &[T]) -> Vec<(usize, T)> {
    x.iter()
        .enumerate()
        .filter(|(_, v)| **v != T::zero())
        .map(|(i, &v)| (i, v))
        .collect()
}

impl<T: Scalar> Dense<T> {
    /// Glorot-uniform weights, zero bias.
    pub fn new(inputs: usize, outputs: usize, activation: Activation, rng: &mut SplitMix64) -> Self {
        let limit = (6.0 / (inputs + outputs) as f64).sqrt();
        let weights = (0..inputs * outputs)
            .map(|_| T::of(rng.gen_range(-limit..limit)))
            .collect();
        Dense {
            inputs,
            outputs,
            weights,
            bias: vec![T::zero(); outputs],
            activation,
        }
    }

    pub fn from_parts(inputs: usize, outputs: usize, weights: Vec<T>, bias: Vec<T>, activation: Activation) -> Result<Self> {
        if weights.len() != inputs * outputs || bias.len() != outputs {
            return Err(Error::Shape(format!(
                "dense {outputs}x{inputs} given {} weights and {} biases",
                weights.len(),
                bias.len()
            )));
        }
        Ok(Dense {
            inputs,
            outputs,
            weights,
            bias,
            activation,
        })
    }

    pub fn forward(&self, x: &[T]) -> Result<DenseCache<T>> {
        if x.len() != self.inputs {
            return Err(Error::Shape(format!("dense expects {} inputs, got {}", self.inputs, x.len())));
        }
        let nz = nonzeros(x);
        let mut pre = self.bias.clone();
        for (i, z) in pre.iter_mut().enumerate() {
            let row = &self.weights[i * self.inputs..(i + 1) * self.inputs];
            let mut acc = T::zero();
            for &(j, v) in &nz {
                acc += row[j] * v;
            }
            *z += acc;
        }
        let out = pre.iter().map(|&z| self.activation.apply(z)).collect();
        Ok(DenseCache { pre, out })
    }

    pub fn infer(&self, x: &[T]) -> Result<Vec<T>> {
        Ok(self.forward(x)?.out)
    }

    /// Accumulates parameter gradients into `grads` and returns `dL/dx` when requested.
    pub fn backward(
        &self,
        x: &[T],
        cache: &DenseCache<T>,
        dout: &[T],
        grads: &mut Dense<T>,
        want_dx: bool,
    ) -> Result<Option<Vec<T>>> {
        if dout.len() != self.outputs || x.len() != self.inputs {
            return Err(Error::Shape("dense backward shapes".into()));
        }
        let dz: Vec<T> = dout
            .iter()
            .zip(&cache.pre)
            .map(|(&d, &z)| d * self.activation.derivative(z))
            .collect();
        let nz = nonzeros(x);
        for (i, &d) in dz.iter().enumerate() {
            if d == T::zero() {
                continue;
            }
            grads.bias[i] += d;
            let row = &mut grads.weights[i * self.inputs..(i + 1) * self.inputs];
            for &(j, v) in &nz {
                row[j] += d * v;
            }
        }
        if !want_dx {
            return Ok(None);
        }
        let mut dx = vec![T::zero(); self.inputs];
        for (i, &d) in dz.iter().enumerate() {
            if d == T::zero() {
                continue;
            }
            let row = &self.weights[i * self.inputs..(i + 1) * self.inputs];
            for (g, &w) in dx.iter_mut().zip(row) {
                *g += w * d;
            }
        }
        Ok(Some(dx))
    }
}

impl<T: Scalar> Params<T> for Dense<T> {
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
    fn identity_linear_layer() {
        let mut w = vec![0.0; 9];
        for i in 0..3 {
            w[i * 3 + i] = 1.0;
        }
        let d = Dense::from_parts(3, 3, w, vec![0.0; 3], Activation::Linear).unwrap();
        assert_eq!(d.infer(&[1.5, -2.0, 0.25]).unwrap(), vec![1.5, -2.0, 0.25]);
    }

    #[test]
    fn leaky_relu_negative_slope() {
        let a = Activation::LEAKY_DEFAULT;
        assert_eq!(a.apply(-1.0f64), -0.001);
        assert_eq!(a.apply(2.0f64), 2.0);
        assert_eq!(Activation::Relu.apply(-1.0f64), 0.0);
    }

    #[test]
    fn shape_errors() {
        let d = Dense::<f64>::new(3, 2, Activation::Relu, &mut stream(0, "x"));
        assert!(d.forward(&[1.0, 2.0]).is_err());
        assert!(Dense::from_parts(3, 2, vec![0.0; 5], vec![0.0; 2], Activation::Relu).is_err());
    }

    #[test]
    fn glorot_bounds() {
        let d = Dense::<f64>::new(10, 20, Activation::Relu, &mut stream(0, "x"));
        let lim = (6.0f64 / 30.0).sqrt();
        assert!(d.weights.iter().all(|w| w.abs() <= lim));
        assert!(d.bias.iter().all(|&b| b == 0.0));
    }
}
