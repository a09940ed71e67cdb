use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{Graph, NnError, Result, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Activation {
    Relu,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpConfig {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub output_dim: usize,
    pub activation: Activation,
    pub init_seed: u64,
}

impl MlpConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = self.layer_dims();
        if dims.iter().any(|&(i, o)| i == 0 || o == 0) {
            return Err(NnError::Config(format!(
                "all MLP dimensions must be >= 1, got input {} hidden {:?} output {}",
                self.input_dim, self.hidden_dims, self.output_dim
            )));
        }
        Ok(())
    }

    /// `(fan_in, fan_out)` of each affine layer.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut sizes = vec![self.input_dim];
        sizes.extend(&self.hidden_dims);
        sizes.push(self.output_dim);
        sizes.windows(2).map(|w| (w[0], w[1])).collect()
    }
}

/// One affine layer: `weight` is `[fan_in, fan_out]`, `bias` is `[1, fan_out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    config: MlpConfig,
    layers: Vec<Dense>,
}

/// Parameters of an [`Mlp`] bound as leaves on a [`Graph`].
#[derive(Clone, Debug)]
pub struct MlpVars {
    pub weights: Vec<Var>,
    pub biases: Vec<Var>,
}

impl MlpVars {
    /// Weight and bias handles in the same order as [`Mlp::params`].
    pub fn all(&self) -> Vec<Var> {
        self.weights
            .iter()
            .zip(&self.biases)
            .flat_map(|(w, b)| [*w, *b])
            .collect()
    }
}

impl Mlp {
    /// Glorot-uniform weights in `±sqrt(6 / (fan_in + fan_out))`, zero biases.
    pub fn new(config: MlpConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let layers = config
            .layer_dims()
            .into_iter()
            .map(|(fan_in, fan_out)| {
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let data = (0..fan_in * fan_out).map(|_| rng.random_range(-limit..limit)).collect();
                Dense {
                    weight: Tensor::matrix(fan_in, fan_out, data).expect("sized"),
                    bias: Tensor::zeros(vec![1, fan_out]),
                }
            })
            .collect();
        Ok(Self { config, layers })
    }

    pub fn zeros(config: MlpConfig) -> Result<Self> {
        config.validate()?;
        let layers = config
            .layer_dims()
            .into_iter()
            .map(|(i, o)| Dense {
                weight: Tensor::zeros(vec![i, o]),
                bias: Tensor::zeros(vec![1, o]),
            })
            .collect();
        Ok(Self { config, layers })
    }

    /// Builds an MLP from explicit layers, checking them against `config`.
    pub fn from_layers(config: MlpConfig, layers: Vec<Dense>) -> Result<Self> {
        config.validate()?;
        let dims = config.layer_dims();
        if dims.len() != layers.len() {
            return Err(NnError::Config(format!(
                "expected {} layers, got {}",
                dims.len(),
                layers.len()
            )));
        }
        for (&(i, o), layer) in dims.iter().zip(&layers) {
            if layer.weight.shape() != [i, o] || layer.bias.shape() != [1, o] {
                return Err(NnError::Shape {
                    op: "from_layers",
                    left: vec![i, o],
                    right: layer.weight.shape().to_vec(),
                });
            }
        }
        Ok(Self { config, layers })
    }

    pub fn config(&self) -> &MlpConfig {
        &self.config
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense] {
        &mut self.layers
    }

    /// All parameter tensors as `[w0, b0, w1, b1, ...]`.
    pub fn params(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    pub fn n_params(&self) -> usize {
        self.params().iter().map(|t| t.numel()).sum()
    }

    /// Registers the parameters on `g`. With `trainable = false` they are
    /// bound as constants and no gradients flow into them.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> MlpVars {
        let mut weights = Vec::with_capacity(self.layers.len());
        let mut biases = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (w, b) = if trainable {
                (g.param(layer.weight.clone()), g.param(layer.bias.clone()))
            } else {
                (g.constant(layer.weight.clone()), g.constant(layer.bias.clone()))
            };
            weights.push(w);
            biases.push(b);
        }
        MlpVars { weights, biases }
    }

    /// Full forward pass on a `[batch, input_dim]` input.
    pub fn forward(&self, g: &mut Graph, vars: &MlpVars, x: Var) -> Result<Var> {
        let width = g.value(x).cols();
        if g.value(x).shape().len() != 2 || width != self.config.input_dim {
            return Err(NnError::Shape {
                op: "mlp_forward",
                left: g.value(x).shape().to_vec(),
                right: vec![self.config.input_dim],
            });
        }
        let z = g.matmul(x, vars.weights[0])?;
        let pre = g.add_bias(z, vars.biases[0])?;
        self.forward_from(g, vars, pre, 1)
    }

    /// Continues a forward pass from the pre-activation of layer
    /// `layer - 1`, i.e. applies the activation and then layers
    /// `layer..`. The final layer has no activation.
    pub fn forward_from(&self, g: &mut Graph, vars: &MlpVars, pre: Var, layer: usize) -> Result<Var> {
        let mut h = pre;
        for l in layer..self.layers.len() {
            let a = match self.config.activation {
                Activation::Relu => g.relu(h),
            };
            let z = g.matmul(a, vars.weights[l])?;
            h = g.add_bias(z, vars.biases[l])?;
        }
        Ok(h)
    }
}

/// Inference-only forward pass of `mlp` on a batched `[batch, input_dim]`
/// input.
pub fn mlp_forward(mlp: &Mlp, input: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let vars = mlp.bind(&mut g, false);
    let x = g.constant(input.clone());
    let y = mlp.forward(&mut g, &vars, x)?;
    Ok(g.value(y).clone())
}
