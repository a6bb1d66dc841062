//! Fully connected ReLU classifier with a softmax output.

use std::fs;
use std::path::Path;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::conformal::ProbMatrix;
use crate::data::Standardizer;
use crate::error::{Error, Result};
use crate::losses::LossKind;
use crate::rng;
use crate::tensor::{softmax_in_place, Matrix, Tape, Tensor};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub hidden_widths: Vec<usize>,
    pub num_classes: usize,
}

impl MlpSpec {
    pub fn new(input_dim: usize, hidden_widths: Vec<usize>, num_classes: usize) -> Result<Self> {
        let spec = Self {
            input_dim,
            hidden_widths,
            num_classes,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::invalid("model spec", "input_dim must be positive"));
        }
        if self.hidden_widths.is_empty() || self.hidden_widths.contains(&0) {
            return Err(Error::invalid(
                "model spec",
                format!("hidden widths {:?} must be nonempty and positive", self.hidden_widths),
            ));
        }
        if self.num_classes < 2 {
            return Err(Error::invalid("model spec", "need at least 2 classes"));
        }
        Ok(())
    }

    /// `(fan_in, fan_out)` of every layer, output layer last.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let mut dims = vec![self.input_dim];
        dims.extend(&self.hidden_widths);
        dims.push(self.num_classes);
        dims.windows(2).map(|w| (w[0], w[1])).collect()
    }

    pub fn param_count(&self) -> usize {
        self.layer_shapes().iter().map(|(i, o)| i * o + o).sum()
    }
}

/// Network weights. Layer `l` maps `h` to `h W_l + b_l`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    spec: MlpSpec,
    seed: u64,
    weights: Vec<Matrix>,
    biases: Vec<Matrix>,
}

impl Mlp {
    /// He-normal weights with standard deviation `sqrt(2 / fan_in)`, zero biases.
    pub fn init(spec: MlpSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = rng::stream(seed, "init");
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for (fan_in, fan_out) in spec.layer_shapes() {
            let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
            let data = (0..fan_in * fan_out).map(|_| normal.sample(&mut rng)).collect();
            weights.push(Matrix::from_vec(fan_in, fan_out, data)?);
            biases.push(Matrix::zeros(1, fan_out));
        }
        Ok(Self {
            spec,
            seed,
            weights,
            biases,
        })
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn weights(&self) -> &[Matrix] {
        &self.weights
    }

    pub fn biases(&self) -> &[Matrix] {
        &self.biases
    }

    /// Parameters in a fixed order: `W_1, b_1, W_2, b_2, ...`.
    pub fn params(&self) -> Vec<&Matrix> {
        self.weights.iter().zip(&self.biases).flat_map(|(w, b)| [w, b]).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Matrix> {
        self.weights
            .iter_mut()
            .zip(self.biases.iter_mut())
            .flat_map(|(w, b)| [w, b])
            .collect()
    }

    /// Register every parameter as a trainable leaf on `tape`.
    pub fn bind<'t>(&self, tape: &'t Tape) -> Result<Vec<Tensor<'t>>> {
        self.params()
            .into_iter()
            .map(|m| Ok(tape.param(m.clone())?))
            .collect()
    }

    /// Class probabilities on the tape, using leaves from [`Mlp::bind`].
    pub fn forward<'t>(&self, bound: &[Tensor<'t>], x: Tensor<'t>) -> Result<Tensor<'t>> {
        forward_layers(bound, x)
    }

    /// Class probabilities without recording gradients.
    pub fn predict_proba(&self, x: &Matrix) -> Result<ProbMatrix> {
        if x.cols() != self.spec.input_dim {
            return Err(crate::tensor::TensorError::shape("predict_proba", x.shape(), (x.rows(), self.spec.input_dim)).into());
        }
        let last = self.weights.len() - 1;
        let mut h = x.clone();
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let mut z = h.matmul(w)?;
            for r in 0..z.rows() {
                for (v, bias) in z.row_mut(r).iter_mut().zip(b.as_slice()) {
                    *v += bias;
                    if l < last && *v <= 0.0 {
                        *v = 0.0;
                    }
                }
            }
            h = z;
        }
        for r in 0..h.rows() {
            softmax_in_place(h.row_mut(r));
        }
        ProbMatrix::new(h)
    }

    pub fn is_finite(&self) -> bool {
        self.params().iter().all(|m| m.is_finite())
    }
}

/// `relu(... relu(x W_1 + b_1) ...) W_L + b_L`, then a row softmax.
///
/// `params` alternates weights and biases.
pub fn forward_layers<'t>(params: &[Tensor<'t>], x: Tensor<'t>) -> Result<Tensor<'t>> {
    if params.is_empty() || params.len() % 2 != 0 {
        return Err(Error::invalid("forward", format!("{} parameter tensors", params.len())));
    }
    let layers = params.len() / 2;
    let mut h = x;
    for l in 0..layers {
        h = h.matmul(params[2 * l])?.add_bias(params[2 * l + 1])?;
        if l + 1 < layers {
            h = h.relu();
        }
    }
    Ok(h.softmax_rows())
}

const CHECKPOINT_FORMAT: &str = "conftrain-mlp";
const CHECKPOINT_VERSION: u32 = 1;

/// Model file contents: network plus the preprocessing needed to apply it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub model: Mlp,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub standardizer: Option<Standardizer>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label_values: Option<Vec<String>>,
    /// Training objective, for report labelling.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub method: Option<LossKind>,
}

impl Checkpoint {
    pub fn new(model: Mlp) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            model,
            standardizer: None,
            label_values: None,
            method: None,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ck: Checkpoint = serde_json::from_str(&text).map_err(|e| Error::Format {
            path: path.into(),
            detail: e.to_string(),
        })?;
        if ck.format != CHECKPOINT_FORMAT || ck.version != CHECKPOINT_VERSION {
            return Err(Error::Format {
                path: path.into(),
                detail: format!("unsupported checkpoint {} v{}", ck.format, ck.version),
            });
        }
        ck.model.spec.validate()?;
        let shapes = ck.model.spec.layer_shapes();
        let ok = shapes.len() == ck.model.weights.len()
            && shapes.len() == ck.model.biases.len()
            && shapes.iter().zip(&ck.model.weights).all(|(&s, w)| w.shape() == s)
            && shapes.iter().zip(&ck.model.biases).all(|(&(_, o), b)| b.shape() == (1, o));
        if !ok {
            return Err(Error::Format {
                path: path.into(),
                detail: "parameter shapes do not match the spec".into(),
            });
        }
        Ok(ck)
    }
}
