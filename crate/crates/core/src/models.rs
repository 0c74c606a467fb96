//! MLP generator and discriminator for 2D synthetic data.
//!
//! The discriminator exposes one hidden layer's post-activation output as
//! the feature vector consumed by the diversity penalty, in addition to
//! its scalar score. The score head is linear; sigmoid squashing, when an
//! objective needs it, lives in the loss.

use serde::{Deserialize, Serialize};

use crate::data::Rng;
use crate::error::{Error, Result};
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    LeakyRelu,
    Tanh,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputActivation {
    None,
    Tanh,
    Sigmoid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub hidden: Vec<(usize, Activation)>,
    pub output_dim: usize,
    pub output_activation: OutputActivation,
    /// Which hidden layer's post-activation output is exported as the
    /// feature vector (discriminator only).
    pub feature_layer_index: usize,
}

impl MlpSpec {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.hidden.is_empty() {
            problems.push("hidden layer list must be nonempty".to_string());
        }
        if self.feature_layer_index >= self.hidden.len().max(1) {
            problems.push(format!(
                "feature_layer_index {} out of range for {} hidden layers",
                self.feature_layer_index,
                self.hidden.len()
            ));
        }
        if self.input_dim == 0 || self.output_dim == 0 {
            problems.push("input_dim and output_dim must be positive".to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(problems))
        }
    }

    /// (fan_in, fan_out) per layer, score head included.
    fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden.len() + 1);
        let mut prev = self.input_dim;
        for &(w, _) in &self.hidden {
            dims.push((prev, w));
            prev = w;
        }
        dims.push((prev, self.output_dim));
        dims
    }

    /// Closed-form trainable parameter count.
    pub fn param_count(&self) -> usize {
        self.layer_dims()
            .iter()
            .map(|&(i, o)| i * o + o)
            .sum()
    }

    pub fn feature_dim(&self) -> usize {
        self.hidden[self.feature_layer_index].0
    }
}

/// Default generator for the 2D experiments: latent -> three ReLU layers
/// -> linear 2D output.
pub fn generator_spec(latent_dim: usize, width: usize) -> MlpSpec {
    MlpSpec {
        input_dim: latent_dim,
        hidden: vec![
            (width, Activation::Relu),
            (width, Activation::Relu),
            (width, Activation::Relu),
        ],
        output_dim: 2,
        output_activation: OutputActivation::None,
        feature_layer_index: 2,
    }
}

/// Default discriminator: 2D point -> three LeakyReLU layers -> linear
/// score, last hidden layer exported as the feature vector.
pub fn discriminator_spec(width: usize) -> MlpSpec {
    MlpSpec {
        input_dim: 2,
        hidden: vec![
            (width, Activation::LeakyRelu),
            (width, Activation::LeakyRelu),
            (width, Activation::LeakyRelu),
        ],
        output_dim: 1,
        output_activation: OutputActivation::None,
        feature_layer_index: 2,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weight: Tensor<f64>, // fan_in x fan_out
    pub bias: Tensor<f64>,   // 1 x fan_out
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    pub layers: Vec<Layer>,
}

impl MlpParams {
    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.all_finite() && l.bias.all_finite())
    }
}

/// He-style init: N(0, 2/fan_in) ahead of ReLU-family activations,
/// N(0, 1/fan_in) otherwise; zero biases.
pub fn init_params(spec: &MlpSpec, rng: &mut Rng) -> MlpParams {
    let dims = spec.layer_dims();
    let mut layers = Vec::with_capacity(dims.len());
    for (idx, &(fan_in, fan_out)) in dims.iter().enumerate() {
        let relu_family = spec
            .hidden
            .get(idx)
            .map(|(_, a)| matches!(a, Activation::Relu | Activation::LeakyRelu))
            .unwrap_or(false);
        let std = if relu_family {
            (2.0 / fan_in as f64).sqrt()
        } else {
            (1.0 / fan_in as f64).sqrt()
        };
        let w: Vec<f64> = (0..fan_in * fan_out)
            .map(|_| std * rng.next_normal())
            .collect();
        layers.push(Layer {
            weight: Tensor::matrix(fan_in, fan_out, w).expect("shape by construction"),
            bias: Tensor::matrix(1, fan_out, vec![0.0; fan_out]).expect("shape by construction"),
        });
    }
    MlpParams { layers }
}

/// Parameter node ids after binding an MLP onto a tape.
#[derive(Debug, Clone)]
pub struct BoundParams {
    pub layers: Vec<(NodeId, NodeId)>,
}

impl BoundParams {
    pub fn node_ids(&self) -> Vec<NodeId> {
        self.layers.iter().flat_map(|&(w, b)| [w, b]).collect()
    }
}

pub fn bind_params(tape: &mut Tape<f64>, params: &MlpParams) -> BoundParams {
    let layers = params
        .layers
        .iter()
        .map(|l| (tape.leaf(l.weight.clone()), tape.leaf(l.bias.clone())))
        .collect();
    BoundParams { layers }
}

/// Differentiable forward pass. Returns the output node and the feature
/// node (post-activation output of `feature_layer_index`).
pub fn mlp_forward(
    tape: &mut Tape<f64>,
    bound: &BoundParams,
    spec: &MlpSpec,
    input: NodeId,
) -> Result<(NodeId, NodeId)> {
    if tape.value(input).cols() != spec.input_dim {
        return Err(Error::ShapeMismatch {
            op: "mlp_forward",
            lhs: tape.value(input).shape().to_vec(),
            rhs: vec![spec.input_dim],
        });
    }
    let mut h = input;
    let mut feature = input;
    for (idx, &(_, act)) in spec.hidden.iter().enumerate() {
        let (w, b) = bound.layers[idx];
        let lin = tape.matmul(h, w)?;
        let lin = tape.add(lin, b)?;
        h = match act {
            Activation::Relu => tape.relu(lin)?,
            Activation::LeakyRelu => tape.leaky_relu(lin, LEAKY_SLOPE)?,
            Activation::Tanh => tape.tanh(lin)?,
        };
        if idx == spec.feature_layer_index {
            feature = h;
        }
    }
    let (w, b) = bound.layers[spec.hidden.len()];
    let lin = tape.matmul(h, w)?;
    let mut out = tape.add(lin, b)?;
    out = match spec.output_activation {
        OutputActivation::None => out,
        OutputActivation::Tanh => tape.tanh(out)?,
        OutputActivation::Sigmoid => tape.sigmoid(out)?,
    };
    Ok((out, feature))
}

/// Plain (tape-free) forward evaluation, for sampling and metrics where
/// no gradients are needed.
pub fn mlp_eval(params: &MlpParams, spec: &MlpSpec, input: &Tensor<f64>) -> Result<Tensor<f64>> {
    let mut tape = Tape::new();
    let bound = bind_params(&mut tape, params);
    let x = tape.leaf(input.clone());
    let (out, _) = mlp_forward(&mut tape, &bound, spec, x)?;
    Ok(tape.value(out).clone())
}

// -- checkpoint format ---------------------------------------------------

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct LayerDoc {
    rows: usize,
    cols: usize,
    weight: Vec<f64>,
    bias: Vec<f64>,
}

/// Flat JSON checkpoint document. Serialization uses shortest-roundtrip
/// float formatting, so a round trip is bit-exact.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub seed: u64,
    pub generator_spec: MlpSpec,
    pub discriminator_spec: MlpSpec,
    generator: Vec<LayerDoc>,
    discriminator: Vec<LayerDoc>,
}

fn to_docs(params: &MlpParams) -> Vec<LayerDoc> {
    params
        .layers
        .iter()
        .map(|l| LayerDoc {
            rows: l.weight.shape()[0],
            cols: l.weight.shape()[1],
            weight: l.weight.data().to_vec(),
            bias: l.bias.data().to_vec(),
        })
        .collect()
}

fn from_docs(docs: &[LayerDoc]) -> Result<MlpParams> {
    let layers = docs
        .iter()
        .map(|d| {
            Ok(Layer {
                weight: Tensor::matrix(d.rows, d.cols, d.weight.clone())?,
                bias: Tensor::matrix(1, d.cols, d.bias.clone())?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MlpParams { layers })
}

impl Checkpoint {
    pub fn new(
        seed: u64,
        generator_spec: &MlpSpec,
        generator: &MlpParams,
        discriminator_spec: &MlpSpec,
        discriminator: &MlpParams,
    ) -> Self {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            seed,
            generator_spec: generator_spec.clone(),
            discriminator_spec: discriminator_spec.clone(),
            generator: to_docs(generator),
            discriminator: to_docs(discriminator),
        }
    }

    pub fn generator_params(&self) -> Result<MlpParams> {
        from_docs(&self.generator)
    }

    pub fn discriminator_params(&self) -> Result<MlpParams> {
        from_docs(&self.discriminator)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let json = serde_json::to_string(self)?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let json = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&json)?)
    }
}
