//! Named parameter enumeration shared by every trainable component.

use rand::Rng;

use crate::autograd::{Tape, Var};
use crate::tensor::Tensor;

/// Borrowed view of one named parameter array.
#[derive(Debug)]
pub struct ParamRef<'a> {
    pub name: String,
    pub tensor: &'a Tensor,
    /// Weight decay applies to weights only, never to biases.
    pub decay: bool,
}

/// A component owning trainable arrays. `params` and `params_mut` must list
/// the arrays in the same order; that order is also the binding order used
/// when the component is placed on a tape.
pub trait Parameters {
    fn params(&self) -> Vec<ParamRef<'_>>;
    fn params_mut(&mut self) -> Vec<&mut Tensor>;

    fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.tensor.len()).sum()
    }

    /// All arrays concatenated in parameter order.
    fn flat_values(&self) -> Vec<f64> {
        self.params().iter().flat_map(|p| p.tensor.data().iter().copied()).collect()
    }

    /// Overwrites every array from a vector laid out like [`Parameters::flat_values`].
    fn set_flat_values(&mut self, values: &[f64]) {
        let mut offset = 0;
        for t in self.params_mut() {
            let n = t.len();
            t.data_mut().copy_from_slice(&values[offset..offset + n]);
            offset += n;
        }
        assert_eq!(offset, values.len(), "flat parameter vector length");
    }

    /// Places every array on the tape, as trainable leaves or constants.
    fn bind(&self, tape: &mut Tape, trainable: bool) -> Vec<Var> {
        self.params()
            .into_iter()
            .map(|p| {
                if trainable {
                    tape.leaf(p.tensor.clone())
                } else {
                    tape.constant(p.tensor.clone())
                }
            })
            .collect()
    }
}

pub(crate) fn weight<'a>(name: String, tensor: &'a Tensor) -> ParamRef<'a> {
    ParamRef {
        name,
        tensor,
        decay: true,
    }
}

pub(crate) fn bias<'a>(name: String, tensor: &'a Tensor) -> ParamRef<'a> {
    ParamRef {
        name,
        tensor,
        decay: false,
    }
}

/// Variance-preserving uniform init in `[-s, s]`, `s = sqrt(6 / (fan_in + fan_out))`.
pub fn glorot_uniform<R: Rng + ?Sized>(
    shape: &[usize],
    fan_in: usize,
    fan_out: usize,
    rng: &mut R,
) -> Tensor {
    let s = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::uniform(shape, -s, s, rng)
}
