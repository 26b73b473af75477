use rand::Rng;

use super::{NumericsError, Tape, Tensor, Var};

/// Dense layer `y = W x + b` with `W: [out, in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    /// Uniform(−1/√fan_in, 1/√fan_in) weights and biases.
    pub fn init<R: Rng>(fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let weight = (0..fan_in * fan_out).map(|_| rng.random_range(-bound..bound)).collect();
        let bias = (0..fan_out).map(|_| rng.random_range(-bound..bound)).collect();
        Self {
            weight: Tensor::from_parts(vec![fan_out, fan_in], weight),
            bias: Tensor::from_parts(vec![fan_out], bias),
        }
    }

    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: Tensor::zeros(vec![fan_out, fan_in]),
            bias: Tensor::zeros(vec![fan_out]),
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn fan_out(&self) -> usize {
        self.weight.shape()[0]
    }

    /// Forward cost of one application: `2 · in · out`.
    pub fn flops(&self) -> u64 {
        2 * (self.fan_in() * self.fan_out()) as u64
    }

    /// Plain evaluation without recording.
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let m = self.fan_in();
        let w = self.weight.data();
        self.bias
            .data()
            .iter()
            .enumerate()
            .map(|(i, b)| b + w[i * m..(i + 1) * m].iter().zip(x).map(|(a, c)| a * c).sum::<f64>())
            .collect()
    }
}

/// Stack of [`Linear`] layers with ReLU between them (no activation after the last).
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

/// Tape handles for one [`Mlp`]'s parameters, in `[w0, b0, w1, b1, …]` order.
#[derive(Debug, Clone)]
pub struct MlpVars {
    pub params: Vec<Var>,
}

impl Mlp {
    /// `sizes = [input, hidden…, output]`.
    pub fn init<R: Rng>(sizes: &[usize], rng: &mut R) -> Self {
        assert!(sizes.len() >= 2, "an MLP needs at least input and output sizes");
        let layers = sizes.windows(2).map(|w| Linear::init(w[0], w[1], rng)).collect();
        Self { layers }
    }

    pub fn zeros(sizes: &[usize]) -> Self {
        assert!(sizes.len() >= 2, "an MLP needs at least input and output sizes");
        let layers = sizes.windows(2).map(|w| Linear::zeros(w[0], w[1])).collect();
        Self { layers }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].fan_in()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map(Linear::fan_out).unwrap_or(0)
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![self.input_dim()];
        s.extend(self.layers.iter().map(Linear::fan_out));
        s
    }

    pub fn flops(&self) -> u64 {
        self.layers.iter().map(Linear::flops).sum()
    }

    pub fn params(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    /// Registers the parameters on `tape`, as leaves or (when frozen) constants.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> MlpVars {
        let params = self
            .params()
            .into_iter()
            .map(|p| {
                if trainable {
                    tape.leaf(p.clone())
                } else {
                    tape.constant(p.clone())
                }
            })
            .collect();
        MlpVars { params }
    }

    /// Plain evaluation without recording.
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut h = x.to_vec();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.apply(&h);
            if i < last {
                h.iter_mut().for_each(|v| *v = v.max(0.0));
            }
        }
        h
    }
}

impl MlpVars {
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var, NumericsError> {
        let n_layers = self.params.len() / 2;
        let mut h = x;
        for (i, pair) in self.params.chunks(2).enumerate() {
            h = tape.affine(pair[0], h, pair[1])?;
            if i + 1 < n_layers {
                h = tape.relu(h)?;
            }
        }
        Ok(h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn init_respects_fan_in_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mlp = Mlp::init(&[16, 8, 2], &mut rng);
        let bound = 1.0 / 4.0;
        assert!(mlp.layers[0].weight.data().iter().all(|w| w.abs() <= bound));
        assert_eq!(mlp.sizes(), vec![16, 8, 2]);
    }

    #[test]
    fn tape_forward_matches_plain_apply() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mlp = Mlp::init(&[3, 5, 2], &mut rng);
        let x = vec![0.2, -0.4, 1.1];
        let mut tape = Tape::new();
        let vars = mlp.bind(&mut tape, true);
        let xv = tape.constant(Tensor::vector(x.clone()).unwrap());
        let y = vars.forward(&mut tape, xv).unwrap();
        assert_eq!(tape.value(y).data(), mlp.apply(&x).as_slice());
    }

    #[test]
    fn flops_are_two_mn_per_layer() {
        let mlp = Mlp::zeros(&[8, 4]);
        assert_eq!(mlp.flops(), 64);
    }
}
