//! Multilayer perceptrons.
//!
//! Weights are stored `[in, out]` so a batch `X` (rows are examples) maps to
//! `XW + b`. Parameters live outside the tape; [`Mlp::bind`] records them as
//! leaves for one forward/backward pass.

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::linalg;
use crate::scalar::Real;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp<T: Real> {
    widths: Vec<usize>,
    weights: Vec<Tensor<T>>,
    biases: Vec<Tensor<T>>,
    activation: Activation,
    seed: u64,
}

/// Parameters of an [`Mlp`] recorded on a tape.
pub struct BoundMlp<'t, T: Real> {
    weights: Vec<Var<'t, T>>,
    biases: Vec<Var<'t, T>>,
}

impl<'t, T: Real> BoundMlp<'t, T> {
    /// Batched forward pass: `x` is `[batch, in]` or a single `[in]` vector.
    pub fn forward(&self, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let single = x.shape().len() == 1;
        let mut h = if single { x.reshape(&[1, x.len()])? } else { x };
        let last = self.weights.len() - 1;
        for (k, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            h = h.matmul(*w)?.add_row(*b)?;
            if k < last {
                h = h.relu();
            }
        }
        if single {
            let n = h.len();
            h = h.reshape(&[n])?;
        }
        Ok(h)
    }

    /// Gradients in [`Mlp::params`] order.
    pub fn gradients(&self, grads: &Gradients<T>) -> Vec<Tensor<T>> {
        self.weights
            .iter()
            .zip(&self.biases)
            .flat_map(|(w, b)| [grads.wrt(*w), grads.wrt(*b)])
            .collect()
    }
}

impl<T: Real> Mlp<T> {
    /// Kaiming-uniform weights (bound `√(6/fan_in)`), zero biases.
    pub fn init(widths: &[usize], seed: u64) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::Config(format!(
                "an MLP needs at least input and output widths, all positive; got {widths:?}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for pair in widths.windows(2) {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let bound = (6.0 / fan_in as f64).sqrt();
            let w = (0..fan_in * fan_out)
                .map(|_| T::of(rng.random_range(-bound..bound)))
                .collect();
            weights.push(Tensor::matrix(fan_in, fan_out, w)?);
            biases.push(Tensor::zeros(&[fan_out]));
        }
        Ok(Mlp {
            widths: widths.to_vec(),
            weights,
            biases,
            activation: Activation::Relu,
            seed,
        })
    }

    /// Widths `[input, hidden × depth, output]`.
    pub fn with_hidden(input: usize, hidden: usize, depth: usize, output: usize, seed: u64) -> Result<Self> {
        let mut widths = vec![input];
        widths.extend(std::iter::repeat(hidden).take(depth));
        widths.push(output);
        Self::init(&widths, seed)
    }

    /// Set the final layer to zero so the network initially outputs 0.
    pub fn zero_last_layer(mut self) -> Self {
        if let Some(w) = self.weights.last_mut() {
            w.data_mut().iter_mut().for_each(|v| *v = T::zero());
        }
        if let Some(b) = self.biases.last_mut() {
            b.data_mut().iter_mut().for_each(|v| *v = T::zero());
        }
        self
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn num_params(&self) -> usize {
        self.widths.windows(2).map(|p| p[0] * p[1] + p[1]).sum()
    }

    /// Parameter tensors, interleaved `W₀, b₀, W₁, b₁, …`.
    pub fn params(&self) -> Vec<&Tensor<T>> {
        self.weights
            .iter()
            .zip(&self.biases)
            .flat_map(|(w, b)| [w, b])
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.weights
            .iter_mut()
            .zip(self.biases.iter_mut())
            .flat_map(|(w, b)| [w, b])
            .collect()
    }

    pub fn bind<'t>(&self, tape: &'t Tape<T>) -> BoundMlp<'t, T> {
        BoundMlp {
            weights: self.weights.iter().map(|w| tape.var(w.clone())).collect(),
            biases: self.biases.iter().map(|b| tape.var(b.clone())).collect(),
        }
    }

    fn check_input(&self, d: usize) -> Result<()> {
        if d != self.input_dim() {
            return Err(Error::shape(
                "mlp forward",
                format!("input has {d} features, network expects {}", self.input_dim()),
            ));
        }
        Ok(())
    }

    /// Forward pass on the tape with freshly bound parameters.
    pub fn forward_on<'t>(&self, x: Var<'t, T>) -> Result<(Var<'t, T>, BoundMlp<'t, T>)> {
        let shape = x.shape();
        self.check_input(*shape.last().unwrap_or(&0))?;
        let bound = self.bind(x.tape());
        let y = bound.forward(x)?;
        Ok((y, bound))
    }

    /// Plain forward pass for one input vector.
    pub fn forward(&self, x: &[T]) -> Result<Vec<T>> {
        self.check_input(x.len())?;
        let mut h = x.to_vec();
        let last = self.weights.len() - 1;
        for (k, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let mut next = linalg::matvec_t_raw(w.data(), w.rows(), w.cols(), &h);
            for (v, &bias) in next.iter_mut().zip(b.data()) {
                *v += bias;
                if k < last {
                    *v = v.max(T::zero());
                }
            }
            h = next;
        }
        Ok(h)
    }

    /// Plain forward pass for a `[batch, in]` matrix.
    pub fn forward_batch(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(x.cols())?;
        let mut h = x.clone();
        let last = self.weights.len() - 1;
        for (k, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            h = linalg::matmul(&h, w)?;
            let cols = h.cols();
            for (i, v) in h.data_mut().iter_mut().enumerate() {
                *v += b.data()[i % cols];
                if k < last {
                    *v = v.max(T::zero());
                }
            }
        }
        Ok(h)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            widths: self.widths.clone(),
            seed: self.seed,
            activation: self.activation,
            params: self
                .params()
                .into_iter()
                .map(|t| {
                    let bytes: Vec<u8> = t.data().iter().flat_map(|v| v.as_f64().to_le_bytes()).collect();
                    B64.encode(bytes)
                })
                .collect(),
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let mut mlp = Self::init(&ck.widths, ck.seed)?;
        mlp.activation = ck.activation;
        let expected = 2 * (ck.widths.len() - 1);
        if ck.params.len() != expected {
            return Err(Error::Format(format!(
                "checkpoint lists {} parameter arrays, widths imply {expected}",
                ck.params.len()
            )));
        }
        for (slot, enc) in mlp.params_mut().into_iter().zip(&ck.params) {
            let values = decode_f64s(enc)?;
            if values.len() != slot.len() {
                return Err(Error::Format(format!(
                    "parameter array holds {} values, expected {}",
                    values.len(),
                    slot.len()
                )));
            }
            for (s, v) in slot.data_mut().iter_mut().zip(values) {
                *s = T::of(v);
            }
        }
        Ok(mlp)
    }

    pub fn save_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_checkpoint()).expect("checkpoint serializes")
    }

    pub fn load_json(text: &str) -> Result<Self> {
        Self::from_checkpoint(&serde_json::from_str(text)?)
    }
}

/// Serialized [`Mlp`]: parameters are base64 little-endian `f64` arrays.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub widths: Vec<usize>,
    pub seed: u64,
    pub activation: Activation,
    pub params: Vec<String>,
}

pub(crate) fn decode_f64s(enc: &str) -> Result<Vec<f64>> {
    let bytes = B64
        .decode(enc)
        .map_err(|e| Error::Format(format!("bad base64 array: {e}")))?;
    if bytes.len() % 8 != 0 {
        return Err(Error::Format(format!("array byte length {} is not a multiple of 8", bytes.len())));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

pub(crate) fn encode_f64s(values: &[f64]) -> String {
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    B64.encode(bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parameter_count_formula() {
        let m = Mlp::<f64>::init(&[2, 4, 2], 0).unwrap();
        assert_eq!(m.num_params(), 22);
        assert_eq!(m.params().iter().map(|t| t.len()).sum::<usize>(), 22);
    }

    #[test]
    fn seeds_control_parameters() {
        let a = Mlp::<f64>::init(&[3, 5, 2], 11).unwrap();
        let b = Mlp::<f64>::init(&[3, 5, 2], 11).unwrap();
        let c = Mlp::<f64>::init(&[3, 5, 2], 12).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.params()[0], c.params()[0]);
    }

    #[test]
    fn zero_last_layer_outputs_zero() {
        let m = Mlp::<f64>::init(&[3, 8, 2], 1).unwrap().zero_last_layer();
        assert_eq!(m.forward(&[1.0, -2.0, 0.5]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn single_linear_layer_matches_matmul() {
        let mut m = Mlp::<f64>::init(&[2, 3], 0).unwrap();
        *m.params_mut()[1] = Tensor::vector(vec![0.5, -1.0, 2.0]);
        let w = m.params()[0].clone();
        let x = [1.5, -0.25];
        let y = m.forward(&x).unwrap();
        for j in 0..3 {
            let want = x[0] * w.at(0, j) + x[1] * w.at(1, j) + [0.5, -1.0, 2.0][j];
            assert!((y[j] - want).abs() < 1e-15);
        }
    }

    #[test]
    fn tape_and_plain_forward_agree() {
        let m = Mlp::<f64>::init(&[3, 6, 6, 2], 5).unwrap();
        let xs = Tensor::from_rows(&[vec![0.1, 0.2, -0.3], vec![1.0, -1.0, 0.5]]).unwrap();
        let batch = m.forward_batch(&xs).unwrap();
        let tape = Tape::new();
        let (out, _) = m.forward_on(tape.constant(xs.clone())).unwrap();
        for i in 0..2 {
            let single = m.forward(xs.row(i)).unwrap();
            for j in 0..2 {
                assert!((single[j] - batch.at(i, j)).abs() < 1e-14);
                assert!((single[j] - out.value().at(i, j)).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn wrong_input_width_is_a_shape_error() {
        let m = Mlp::<f64>::init(&[3, 2], 0).unwrap();
        assert!(matches!(m.forward(&[1.0]), Err(Error::Shape { .. })));
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let m = Mlp::<f64>::init(&[4, 7, 3], 99).unwrap();
        let back = Mlp::<f64>::load_json(&m.save_json()).unwrap();
        assert_eq!(m, back);
    }
}
