//! Dense tensors, trainable parameters, and the reverse-mode tape.

mod attention;
mod kernels;
mod matmul;
mod optim;
mod tape;

pub use attention::{check_heads, multi_head_attention, AttentionNodes, AttentionParams};
pub use kernels::{BnMode, BnState, Padding, BN_EPS, BN_MOMENTUM, CE_FLOOR};
pub use matmul::{matmul, matmul_nt, matmul_tn};
pub use optim::{adam_step, AdamConfig};
pub use tape::{NodeId, RunMode, Tape};

use crate::element::Element;
use crate::error::{Error, Result};
use rand::Rng;

/// Dense N-dimensional array, row-major.
///
/// `grad` is populated by [`Tape::backward`] (or by hand in optimizer tests)
/// and only ever for tensors with `requires_grad` set.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<F: Element = f32> {
    pub shape: Vec<usize>,
    pub data: Vec<F>,
    pub requires_grad: bool,
    pub grad: Option<Vec<F>>,
}

impl<F: Element> Tensor<F> {
    pub fn new(shape: &[usize], data: Vec<F>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape("tensor::new", &[numel], &[data.len()]));
        }
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Parameter(format!(
                "tensor extents must be positive, got {shape:?}"
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![F::zero(); numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn full(shape: &[usize], value: F) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(value: F) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    /// Standard-normal fill, sampled in f64 so the stream is identical for
    /// every element type under the same generator state.
    pub fn randn<R: Rng>(shape: &[usize], rng: &mut R) -> Self {
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(|_| F::from_f64(sample_normal(rng))).collect();
        Tensor {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn item(&self) -> F {
        debug_assert_eq!(self.numel(), 1);
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Four-way NCHW split of the shape; errors on other ranks.
    pub fn dims4(&self, op: &'static str) -> Result<(usize, usize, usize, usize)> {
        match self.shape.as_slice() {
            &[n, c, h, w] => Ok((n, c, h, w)),
            _ => Err(Error::shape(op, &[4], &[self.shape.len()])),
        }
    }
}

/// Box-Muller transform over the generator's uniform f64 stream.
pub fn sample_normal<R: Rng>(rng: &mut R) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen::<f64>();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// A trainable tensor plus its Adam moment buffers.
#[derive(Debug, Clone)]
pub struct Parameter<F: Element = f32> {
    pub tensor: Tensor<F>,
    pub adam_m: Vec<F>,
    pub adam_v: Vec<F>,
    pub step_count: u64,
}

impl<F: Element> Parameter<F> {
    pub fn new(tensor: Tensor<F>) -> Self {
        let numel = tensor.numel();
        Parameter {
            tensor: tensor.with_grad(),
            adam_m: vec![F::zero(); numel],
            adam_v: vec![F::zero(); numel],
            step_count: 0,
        }
    }

    /// Kaiming-uniform fill for ReLU stacks: U(-b, b) with b = sqrt(6/fan_in).
    pub fn kaiming<R: Rng>(shape: &[usize], fan_in: usize, rng: &mut R) -> Self {
        let bound = (6.0 / fan_in as f64).sqrt();
        let numel: usize = shape.iter().product();
        let data = (0..numel)
            .map(|_| F::from_f64(rng.gen_range(-bound..bound)))
            .collect();
        Parameter::new(Tensor {
            shape: shape.to_vec(),
            data,
            requires_grad: true,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Parameter::new(Tensor::zeros(shape))
    }

    pub fn ones(shape: &[usize]) -> Self {
        Parameter::new(Tensor::full(shape, F::one()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::ChaCha8Rng;
    use rand::SeedableRng;

    #[test]
    fn new_rejects_length_mismatch() {
        let err = Tensor::<f32>::new(&[2, 3], vec![0.0; 5]).unwrap_err();
        assert!(matches!(err, Error::Shape { .. }));
    }

    #[test]
    fn randn_is_deterministic_and_type_stable() {
        let mut a = ChaCha8Rng::seed_from_u64(9);
        let mut b = ChaCha8Rng::seed_from_u64(9);
        let t32 = Tensor::<f32>::randn(&[4, 4], &mut a);
        let t64 = Tensor::<f64>::randn(&[4, 4], &mut b);
        for (x, y) in t32.data.iter().zip(&t64.data) {
            assert_eq!(*x, *y as f32);
        }
    }

    #[test]
    fn parameter_buffers_are_zeroed_and_shape_matched() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = Parameter::<f32>::kaiming(&[8, 3, 3, 3], 27, &mut rng);
        assert_eq!(p.adam_m.len(), p.tensor.numel());
        assert_eq!(p.adam_v.len(), p.tensor.numel());
        assert!(p.adam_m.iter().all(|&v| v == 0.0));
        assert_eq!(p.step_count, 0);
        let bound = (6.0 / 27.0_f64).sqrt() as f32;
        assert!(p.tensor.data.iter().all(|v| v.abs() <= bound));
    }
}
