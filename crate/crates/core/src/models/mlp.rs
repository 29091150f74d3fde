use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AdResult, BoundParams, Matrix, ParamId, ParamSet, Tape, Var};

/// Fully connected network with tanh hidden activations and a linear output layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    layers: Vec<(ParamId, ParamId)>,
    input_dim: usize,
    output_dim: usize,
}

impl Mlp {
    /// `sizes` lists every layer width, input first and output last.
    pub fn new<R: Rng>(params: &mut ParamSet, prefix: &str, sizes: &[usize], rng: &mut R) -> Self {
        assert!(sizes.len() >= 2, "an MLP needs at least input and output sizes");
        let layers = sizes
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let weight = params.push_normal(format!("{prefix}.l{i}.w"), w[0], w[1], rng);
                let bias = params.push(format!("{prefix}.l{i}.b"), Matrix::zeros(1, w[1]));
                (weight, bias)
            })
            .collect();
        Mlp { layers, input_dim: sizes[0], output_dim: *sizes.last().unwrap() }
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.output_dim
    }

    pub fn forward(&self, tape: &mut Tape, params: &BoundParams, x: Var) -> AdResult<Var> {
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            let lin = tape.matmul(h, params.var(w))?;
            h = tape.add(lin, params.var(b))?;
            if i != last {
                h = tape.tanh(h);
            }
        }
        Ok(h)
    }
}

/// `[input, hidden x layers, output]`.
pub(crate) fn layer_sizes(input: usize, hidden: usize, layers: usize, output: usize) -> Vec<usize> {
    let mut sizes = vec![input];
    sizes.extend(std::iter::repeat_n(hidden, layers));
    sizes.push(output);
    sizes
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn shapes_and_determinism() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut params = ParamSet::new();
        let mlp = Mlp::new(&mut params, "net", &layer_sizes(3, 8, 2, 4), &mut rng);
        assert_eq!(params.len(), 6);
        let run = || {
            let mut tape = Tape::new();
            let bound = params.bind(&mut tape);
            let x = tape.constant(Matrix::from_vec(2, 3, vec![0.1, 0.2, 0.3, -1.0, 0.0, 2.0]));
            let y = mlp.forward(&mut tape, &bound, x).unwrap();
            tape.value(y).clone()
        };
        let out = run();
        assert_eq!(out.shape(), (2, 4));
        assert_eq!(out, run());
    }
}
