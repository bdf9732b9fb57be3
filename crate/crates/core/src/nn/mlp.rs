//! Fully connected feed-forward networks with a flat parameter vector.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tape::{Tape, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Linear,
    Sigmoid,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Linear => x,
            Activation::Sigmoid => 1.0 / (1.0 + (-x).exp()),
        }
    }

    fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Linear => 1.0,
            Activation::Sigmoid => y * (1.0 - y),
        }
    }

    fn on_tape(self, tape: &mut Tape, x: Var) -> Var {
        match self {
            Activation::Tanh => tape.tanh(x),
            Activation::Linear => x,
            Activation::Sigmoid => tape.sigmoid(x),
        }
    }
}

/// A multilayer perceptron.
///
/// Layer `l` maps `sizes[l] -> sizes[l + 1]`; its weights are stored row-major
/// (`out × in`) followed by its biases, and layers are laid out back to back.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    sizes: Vec<usize>,
    hidden: Activation,
    output: Activation,
    #[serde(skip)]
    params: Vec<f64>,
}

/// Activations of every layer from one forward pass, input first.
#[derive(Debug, Clone)]
pub struct Trace {
    pub layers: Vec<Vec<f64>>,
}

impl Trace {
    pub fn output(&self) -> &[f64] {
        self.layers.last().expect("trace has layers")
    }
}

/// Number of parameters of an MLP with the given layer sizes.
pub fn param_count(sizes: &[usize]) -> usize {
    sizes.windows(2).map(|w| (w[0] + 1) * w[1]).sum()
}

impl Mlp {
    /// All-zero network.
    pub fn zeros(sizes: &[usize], hidden: Activation, output: Activation) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::Config(format!("invalid layer sizes {sizes:?}")));
        }
        Ok(Self {
            sizes: sizes.to_vec(),
            hidden,
            output,
            params: vec![0.0; param_count(sizes)],
        })
    }

    /// Weights and biases uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    pub fn new<R: Rng + ?Sized>(
        sizes: &[usize],
        hidden: Activation,
        output: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        let mut net = Self::zeros(sizes, hidden, output)?;
        let mut offset = 0;
        for w in sizes.windows(2) {
            let (n_in, n_out) = (w[0], w[1]);
            let bound = 1.0 / (n_in as f64).sqrt();
            for p in &mut net.params[offset..offset + (n_in + 1) * n_out] {
                *p = rng.random_range(-bound..=bound);
            }
            offset += (n_in + 1) * n_out;
        }
        Ok(net)
    }

    /// Rebuilds a network around an existing parameter vector.
    pub fn with_params(
        sizes: &[usize],
        hidden: Activation,
        output: Activation,
        params: Vec<f64>,
    ) -> Result<Self> {
        let mut net = Self::zeros(sizes, hidden, output)?;
        if params.len() != net.params.len() {
            return Err(Error::InputShape {
                expected: net.params.len(),
                got: params.len(),
            });
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::Diverged("non-finite network parameter".into()));
        }
        net.params = params;
        Ok(net)
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn hidden_activation(&self) -> Activation {
        self.hidden
    }

    pub fn output_activation(&self) -> Activation {
        self.output
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn set_params(&mut self, params: Vec<f64>) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::InputShape {
                expected: self.params.len(),
                got: params.len(),
            });
        }
        self.params = params;
        Ok(())
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        if input.len() != self.input_dim() {
            return Err(Error::InputShape {
                expected: self.input_dim(),
                got: input.len(),
            });
        }
        Ok(self.forward_unchecked(input))
    }

    /// Forward pass without the shape check; panics on mismatch.
    pub fn forward_unchecked(&self, input: &[f64]) -> Vec<f64> {
        let mut x = input.to_vec();
        let mut offset = 0;
        let last = self.sizes.len() - 2;
        for (l, w) in self.sizes.windows(2).enumerate() {
            let (n_in, n_out) = (w[0], w[1]);
            let weights = &self.params[offset..offset + n_in * n_out];
            let biases = &self.params[offset + n_in * n_out..offset + (n_in + 1) * n_out];
            let act = if l == last { self.output } else { self.hidden };
            let y: Vec<f64> = (0..n_out)
                .map(|o| {
                    let row = &weights[o * n_in..(o + 1) * n_in];
                    let z = biases[o] + row.iter().zip(&x).map(|(a, b)| a * b).sum::<f64>();
                    act.apply(z)
                })
                .collect();
            x = y;
            offset += (n_in + 1) * n_out;
        }
        x
    }

    /// Forward pass that keeps every layer's activations for [`Mlp::backward`].
    pub fn forward_trace(&self, input: &[f64]) -> Trace {
        let mut layers = Vec::with_capacity(self.sizes.len());
        layers.push(input.to_vec());
        let mut offset = 0;
        let last = self.sizes.len() - 2;
        for (l, w) in self.sizes.windows(2).enumerate() {
            let (n_in, n_out) = (w[0], w[1]);
            let weights = &self.params[offset..offset + n_in * n_out];
            let biases = &self.params[offset + n_in * n_out..offset + (n_in + 1) * n_out];
            let act = if l == last { self.output } else { self.hidden };
            let x = &layers[l];
            let y: Vec<f64> = (0..n_out)
                .map(|o| {
                    let row = &weights[o * n_in..(o + 1) * n_in];
                    act.apply(biases[o] + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>())
                })
                .collect();
            layers.push(y);
            offset += (n_in + 1) * n_out;
        }
        Trace { layers }
    }

    /// Backpropagates `grad_output` through a recorded pass, adding the
    /// parameter gradient into `grad_params` and returning the input gradient.
    pub fn backward(&self, trace: &Trace, grad_output: &[f64], grad_params: &mut [f64]) -> Vec<f64> {
        let n_layers = self.sizes.len() - 1;
        let mut offsets = Vec::with_capacity(n_layers);
        let mut offset = 0;
        for w in self.sizes.windows(2) {
            offsets.push(offset);
            offset += (w[0] + 1) * w[1];
        }
        let mut g = grad_output.to_vec();
        for l in (0..n_layers).rev() {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            let act = if l == n_layers - 1 { self.output } else { self.hidden };
            let y = &trace.layers[l + 1];
            for (gk, yk) in g.iter_mut().zip(y) {
                *gk *= act.derivative_from_output(*yk);
            }
            let x = &trace.layers[l];
            let off = offsets[l];
            let mut gx = vec![0.0; n_in];
            for o in 0..n_out {
                let go = g[o];
                if go == 0.0 {
                    continue;
                }
                let row = off + o * n_in;
                for i in 0..n_in {
                    grad_params[row + i] += go * x[i];
                    gx[i] += go * self.params[row + i];
                }
                grad_params[off + n_in * n_out + o] += go;
            }
            g = gx;
        }
        g
    }

    /// Records the forward pass on `tape`, reading parameters from the leaf
    /// `params` (normally created by [`Mlp::param_leaf`]).
    pub fn forward_tape(&self, tape: &mut Tape, params: Var, input: Var) -> Var {
        let mut x = input;
        let mut offset = 0;
        let last = self.sizes.len() - 2;
        for (l, w) in self.sizes.windows(2).enumerate() {
            let (n_in, n_out) = (w[0], w[1]);
            let z = tape.dense(params, offset, n_in, n_out, x);
            let act = if l == last { self.output } else { self.hidden };
            x = act.on_tape(tape, z);
            offset += (n_in + 1) * n_out;
        }
        x
    }

    pub fn param_leaf(&self, tape: &mut Tape) -> Var {
        tape.leaf(self.params.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn manual_backward_matches_tape() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for out in [Activation::Tanh, Activation::Linear, Activation::Sigmoid] {
            let net = Mlp::new(&[3, 5, 4, 2], Activation::Tanh, out, &mut rng).unwrap();
            let x = vec![0.3, -0.7, 1.1];
            let upstream = [0.4, -1.3];

            let mut tape = Tape::new();
            let p = net.param_leaf(&mut tape);
            let xv = tape.leaf(x.clone());
            let y = net.forward_tape(&mut tape, p, xv);
            let weighted = tape.dot_const(y, &upstream);
            let g = tape.backward(weighted).unwrap();

            let trace = net.forward_trace(&x);
            assert_eq!(trace.output(), net.forward_unchecked(&x).as_slice());
            let mut gp = vec![0.0; net.params().len()];
            let gx = net.backward(&trace, &upstream, &mut gp);
            for (a, b) in gp.iter().zip(g.wrt(p)) {
                assert!((a - b).abs() < 1e-14);
            }
            for (a, b) in gx.iter().zip(g.wrt(xv)) {
                assert!((a - b).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn param_count_matches_layout() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = Mlp::new(&[4, 12, 12, 1], Activation::Tanh, Activation::Linear, &mut rng).unwrap();
        assert_eq!(net.params().len(), 5 * 12 + 13 * 12 + 13);
        assert_eq!(net.output_dim(), 1);
        assert!(net.params().iter().all(|p| p.abs() <= 0.5));
    }

    #[test]
    fn zero_network_outputs_zero() {
        let net = Mlp::zeros(&[3, 5, 2], Activation::Tanh, Activation::Linear).unwrap();
        assert_eq!(net.forward(&[1.0, -2.0, 7.0]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn single_unit_examples() {
        let net = Mlp::with_params(&[1, 1], Activation::Tanh, Activation::Tanh, vec![1.0, 0.0]).unwrap();
        assert_eq!(net.forward(&[0.0]).unwrap(), vec![0.0]);
        let net =
            Mlp::with_params(&[1, 1], Activation::Tanh, Activation::Linear, vec![2.0, 0.5]).unwrap();
        assert_eq!(net.forward(&[1.0]).unwrap(), vec![2.5]);
    }

    #[test]
    fn sigmoid_output_is_open_unit_interval() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let net = Mlp::new(&[2, 8, 3], Activation::Tanh, Activation::Sigmoid, &mut rng).unwrap();
        for x in [[-5.0, 5.0], [0.0, 0.0], [3.0, 1.0]] {
            for y in net.forward(&x).unwrap() {
                assert!(y > 0.0 && y < 1.0);
            }
        }
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let net = Mlp::zeros(&[3, 2], Activation::Tanh, Activation::Linear).unwrap();
        assert!(matches!(
            net.forward(&[1.0]),
            Err(Error::InputShape { expected: 3, got: 1 })
        ));
    }

    #[test]
    fn tape_forward_matches_plain_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = Mlp::new(&[3, 7, 5, 2], Activation::Tanh, Activation::Tanh, &mut rng).unwrap();
        let x = [0.3, -1.2, 0.8];
        let mut tape = Tape::new();
        let p = net.param_leaf(&mut tape);
        let xi = tape.leaf(x.to_vec());
        let y = net.forward_tape(&mut tape, p, xi);
        assert_eq!(tape.value(y), net.forward(&x).unwrap().as_slice());
    }
}
