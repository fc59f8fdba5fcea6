//! Image and text towers feeding a single shared classification layer.
//!
//! Each tower is a stack of fully connected layers with RELU and inverted
//! dropout between hidden layers; the last layer has `D` units and its output
//! is L2-normalized onto the unit sphere. Both towers' embeddings go through
//! the same `(W, b)`.

mod checkpoint;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{HuseError, Result};
use crate::numerics::{
    l2_normalize_backward, l2_normalize_rows, Matrix, NormCache, RngState, DEFAULT_NORM_EPSILON,
};

pub use checkpoint::{CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Image,
    Text,
}

impl Modality {
    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Image => "image",
            Modality::Text => "text",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Modality {
    type Err = HuseError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "image" | "img" => Ok(Modality::Image),
            "text" | "txt" => Ok(Modality::Text),
            other => Err(HuseError::invalid(format!("unknown modality {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TowerConfig {
    pub input_dim: usize,
    /// Layer widths; the last entry is the embedding size `D`.
    pub hidden_dims: Vec<usize>,
    #[serde(default)]
    pub dropout_rate: f64,
}

impl TowerConfig {
    pub fn new(input_dim: usize, hidden_dims: Vec<usize>, dropout_rate: f64) -> Self {
        Self {
            input_dim,
            hidden_dims,
            dropout_rate,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden_dims.is_empty() {
            return Err(HuseError::invalid("tower needs at least one layer"));
        }
        if self.input_dim == 0 || self.hidden_dims.contains(&0) {
            return Err(HuseError::invalid(format!(
                "tower dimensions must be >= 1: input {} layers {:?}",
                self.input_dim, self.hidden_dims
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(HuseError::invalid(format!(
                "dropout rate must lie in [0, 1), got {}",
                self.dropout_rate
            )));
        }
        Ok(())
    }

    pub fn output_dim(&self) -> usize {
        *self.hidden_dims.last().unwrap_or(&0)
    }
}

/// Fully connected layer, `y = x W + b` with `W` stored `in × out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl Dense {
    fn he_normal(fan_in: usize, fan_out: usize, rng: &mut RngState) -> Self {
        let std = (2.0 / fan_in as f64).sqrt();
        let mut weight = rng.standard_normal(fan_in, fan_out);
        weight.scale(std);
        Self {
            weight,
            bias: vec![0.0; fan_out],
        }
    }

    fn forward(&self, x: &Matrix) -> Result<Matrix> {
        let mut z = x.matmul(&self.weight)?;
        z.add_row_vector(&self.bias)?;
        Ok(z)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseGrads {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// Per-layer state of a train-mode forward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    /// Input to each layer (post-RELU, post-dropout for layers after the first).
    layer_inputs: Vec<Matrix>,
    /// Pre-activations of every layer but the last.
    pre_activations: Vec<Matrix>,
    /// Dropout mask applied after each hidden RELU, if dropout is enabled.
    masks: Vec<Option<Matrix>>,
    norm: NormCache,
}

impl ForwardCache {
    pub fn masks(&self) -> &[Option<Matrix>] {
        &self.masks
    }
}

/// Parameters of one modality tower.
#[derive(Clone, Debug, PartialEq)]
pub struct Tower {
    config: TowerConfig,
    layers: Vec<Dense>,
    norm_epsilon: f64,
}

impl Tower {
    pub fn init(config: TowerConfig, rng: &mut RngState) -> Result<Self> {
        config.validate()?;
        let mut layers = Vec::with_capacity(config.hidden_dims.len());
        let mut fan_in = config.input_dim;
        for &width in &config.hidden_dims {
            layers.push(Dense::he_normal(fan_in, width, rng));
            fan_in = width;
        }
        Ok(Self {
            config,
            layers,
            norm_epsilon: DEFAULT_NORM_EPSILON,
        })
    }

    /// Assembles a tower from explicit layers; shapes must chain.
    pub fn from_layers(layers: Vec<Dense>, dropout_rate: f64, norm_epsilon: f64) -> Result<Self> {
        let first = layers
            .first()
            .ok_or_else(|| HuseError::invalid("tower needs at least one layer"))?;
        let input_dim = first.weight.rows();
        let mut prev = input_dim;
        for (i, layer) in layers.iter().enumerate() {
            if layer.weight.rows() != prev || layer.bias.len() != layer.weight.cols() {
                return Err(HuseError::invalid(format!(
                    "layer {i} shape {:?} / bias {} does not chain from width {prev}",
                    layer.weight.shape(),
                    layer.bias.len()
                )));
            }
            prev = layer.weight.cols();
        }
        let config = TowerConfig::new(
            input_dim,
            layers.iter().map(|l| l.weight.cols()).collect(),
            dropout_rate,
        );
        config.validate()?;
        if norm_epsilon.is_nan() || norm_epsilon <= 0.0 {
            return Err(HuseError::invalid("normalization epsilon must be positive"));
        }
        Ok(Self {
            config,
            layers,
            norm_epsilon,
        })
    }

    pub fn config(&self) -> &TowerConfig {
        &self.config
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense] {
        &mut self.layers
    }

    pub fn output_dim(&self) -> usize {
        self.config.output_dim()
    }

    fn check_input(&self, x: &Matrix) -> Result<()> {
        if x.cols() != self.config.input_dim {
            return Err(HuseError::Shape {
                op: "tower_forward",
                left: x.shape(),
                right: (self.config.input_dim, self.output_dim()),
            });
        }
        Ok(())
    }

    /// Deterministic forward pass without dropout.
    pub fn forward_infer(&self, x: &Matrix) -> Result<Matrix> {
        self.check_input(x)?;
        let last = self.layers.len() - 1;
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(&h)?;
            if i < last {
                relu_in_place(&mut h);
            }
        }
        Ok(l2_normalize_rows(&h, self.norm_epsilon)?.0)
    }

    /// Forward pass with inverted dropout after each hidden RELU; returns the
    /// cache needed by [`Tower::backward`].
    pub fn forward_train(&self, x: &Matrix, rng: &mut RngState) -> Result<(Matrix, ForwardCache)> {
        self.check_input(x)?;
        let last = self.layers.len() - 1;
        let keep = 1.0 - self.config.dropout_rate;
        let mut layer_inputs = Vec::with_capacity(self.layers.len());
        let mut pre_activations = Vec::with_capacity(last);
        let mut masks = Vec::with_capacity(last);
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let z = layer.forward(&h)?;
            layer_inputs.push(h);
            if i == last {
                h = z;
                break;
            }
            let mut a = z.clone();
            relu_in_place(&mut a);
            let mask = if self.config.dropout_rate > 0.0 {
                let m = rng.bernoulli_mask(a.rows(), a.cols(), keep)?;
                for (v, s) in a.as_mut_slice().iter_mut().zip(m.as_slice()) {
                    *v *= s;
                }
                Some(m)
            } else {
                None
            };
            pre_activations.push(z);
            masks.push(mask);
            h = a;
        }
        let (emb, norm) = l2_normalize_rows(&h, self.norm_epsilon)?;
        Ok((
            emb,
            ForwardCache {
                layer_inputs,
                pre_activations,
                masks,
                norm,
            },
        ))
    }

    pub fn forward(
        &self,
        x: &Matrix,
        mode: Mode,
        rng: &mut RngState,
    ) -> Result<(Matrix, Option<ForwardCache>)> {
        match mode {
            Mode::Infer => Ok((self.forward_infer(x)?, None)),
            Mode::Train => {
                let (e, c) = self.forward_train(x, rng)?;
                Ok((e, Some(c)))
            }
        }
    }

    /// Backpropagates `∂L/∂embeddings` through normalization, the final
    /// layer, and every RELU/dropout/affine stage. Returns parameter
    /// gradients and `∂L/∂input`.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        grad_embeddings: &Matrix,
    ) -> Result<(TowerGrads, Matrix)> {
        if cache.layer_inputs.len() != self.layers.len() {
            return Err(HuseError::invalid(
                "forward cache does not belong to this tower",
            ));
        }
        let mut g = l2_normalize_backward(&cache.norm, grad_embeddings)?;
        let mut grads = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let input = &cache.layer_inputs[i];
            let dw = input.t_matmul(&g)?;
            let db = g.column_sums();
            grads.push(DenseGrads {
                weight: dw,
                bias: db,
            });
            let mut g_in = g.matmul_t(&layer.weight)?;
            if i > 0 {
                let z = &cache.pre_activations[i - 1];
                let mask = cache.masks[i - 1].as_ref();
                for (idx, v) in g_in.as_mut_slice().iter_mut().enumerate() {
                    if z.as_slice()[idx] <= 0.0 {
                        *v = 0.0;
                    } else if let Some(m) = mask {
                        *v *= m.as_slice()[idx];
                    }
                }
            }
            g = g_in;
        }
        grads.reverse();
        Ok((TowerGrads { layers: grads }, g))
    }
}

fn relu_in_place(m: &mut Matrix) {
    m.as_mut_slice().iter_mut().for_each(|v| *v = v.max(0.0));
}

#[derive(Clone, Debug, PartialEq)]
pub struct TowerGrads {
    pub layers: Vec<DenseGrads>,
}

/// The shared layer `z = Wᵀ e + b`, stored as `W: D × K`.
#[derive(Clone, Debug, PartialEq)]
pub struct SharedClassifier {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierGrads {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl ClassifierGrads {
    pub fn zeros(dim: usize, classes: usize) -> Self {
        Self {
            weight: Matrix::zeros(dim, classes),
            bias: vec![0.0; classes],
        }
    }
}

impl SharedClassifier {
    pub fn new(weight: Matrix, bias: Vec<f64>) -> Result<Self> {
        if bias.len() != weight.cols() {
            return Err(HuseError::Shape {
                op: "shared_classifier",
                left: weight.shape(),
                right: (1, bias.len()),
            });
        }
        Ok(Self { weight, bias })
    }

    pub fn dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn num_classes(&self) -> usize {
        self.weight.cols()
    }

    pub fn logits(&self, embeddings: &Matrix) -> Result<Matrix> {
        if embeddings.cols() != self.dim() {
            return Err(HuseError::Shape {
                op: "classifier_logits",
                left: embeddings.shape(),
                right: self.weight.shape(),
            });
        }
        let mut z = embeddings.matmul(&self.weight)?;
        z.add_row_vector(&self.bias)?;
        Ok(z)
    }

    /// Parameter gradients and `∂L/∂embeddings` given `∂L/∂logits`.
    pub fn backward(
        &self,
        embeddings: &Matrix,
        grad_logits: &Matrix,
    ) -> Result<(ClassifierGrads, Matrix)> {
        let dw = embeddings.t_matmul(grad_logits)?;
        let db = grad_logits.column_sums();
        let de = grad_logits.matmul_t(&self.weight)?;
        Ok((
            ClassifierGrads {
                weight: dw,
                bias: db,
            },
            de,
        ))
    }
}

/// Two towers plus the shared classifier.
#[derive(Clone, Debug, PartialEq)]
pub struct HuseModel {
    pub image: Tower,
    pub text: Tower,
    pub classifier: SharedClassifier,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelGrads {
    pub image: TowerGrads,
    pub text: TowerGrads,
    pub classifier: ClassifierGrads,
}

impl HuseModel {
    /// He-normal weights (`N(0, 2/fan_in)`) and zero biases, drawn in the
    /// order image tower, text tower, classifier.
    pub fn init(
        image: TowerConfig,
        text: TowerConfig,
        num_classes: usize,
        rng: &mut RngState,
    ) -> Result<Self> {
        image.validate()?;
        text.validate()?;
        if image.output_dim() != text.output_dim() {
            return Err(HuseError::invalid(format!(
                "tower output dims differ: image {} vs text {}",
                image.output_dim(),
                text.output_dim()
            )));
        }
        if num_classes < 2 {
            return Err(HuseError::invalid("need at least 2 classes"));
        }
        let d = image.output_dim();
        let image = Tower::init(image, rng)?;
        let text = Tower::init(text, rng)?;
        let head = Dense::he_normal(d, num_classes, rng);
        Ok(Self {
            image,
            text,
            classifier: SharedClassifier {
                weight: head.weight,
                bias: head.bias,
            },
        })
    }

    pub fn from_parts(image: Tower, text: Tower, classifier: SharedClassifier) -> Result<Self> {
        let d = image.output_dim();
        if text.output_dim() != d || classifier.dim() != d {
            return Err(HuseError::invalid(format!(
                "inconsistent embedding dims: image {d}, text {}, classifier {}",
                text.output_dim(),
                classifier.dim()
            )));
        }
        Ok(Self {
            image,
            text,
            classifier,
        })
    }

    pub fn embedding_dim(&self) -> usize {
        self.classifier.dim()
    }

    pub fn num_classes(&self) -> usize {
        self.classifier.num_classes()
    }

    pub fn norm_epsilon(&self) -> f64 {
        self.image.norm_epsilon
    }

    pub fn tower(&self, modality: Modality) -> &Tower {
        match modality {
            Modality::Image => &self.image,
            Modality::Text => &self.text,
        }
    }

    /// Disables dropout in both towers (used for gradient checks).
    pub fn without_dropout(mut self) -> Self {
        self.image.config.dropout_rate = 0.0;
        self.text.config.dropout_rate = 0.0;
        self
    }

    /// Named parameter tensors in canonical order with their dims.
    pub fn tensors(&self) -> Vec<(String, Vec<usize>, &[f64])> {
        let mut out = Vec::new();
        for (prefix, tower) in [("image", &self.image), ("text", &self.text)] {
            for (i, layer) in tower.layers.iter().enumerate() {
                out.push((
                    format!("{prefix}.{i}.weight"),
                    vec![layer.weight.rows(), layer.weight.cols()],
                    layer.weight.as_slice(),
                ));
                out.push((
                    format!("{prefix}.{i}.bias"),
                    vec![layer.bias.len()],
                    &layer.bias[..],
                ));
            }
        }
        out.push((
            "classifier.weight".into(),
            vec![self.classifier.weight.rows(), self.classifier.weight.cols()],
            self.classifier.weight.as_slice(),
        ));
        out.push((
            "classifier.bias".into(),
            vec![self.classifier.bias.len()],
            &self.classifier.bias[..],
        ));
        out
    }

    /// Mutable views in the same order as [`HuseModel::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for tower in [&mut self.image, &mut self.text] {
            for layer in tower.layers.iter_mut() {
                out.push(layer.weight.as_mut_slice());
                out.push(&mut layer.bias[..]);
            }
        }
        out.push(self.classifier.weight.as_mut_slice());
        out.push(&mut self.classifier.bias[..]);
        out
    }
}

impl ModelGrads {
    /// Gradient tensors in the order of [`HuseModel::tensors`].
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::new();
        for tower in [&self.image, &self.text] {
            for layer in &tower.layers {
                out.push(layer.weight.as_slice());
                out.push(&layer.bias);
            }
        }
        out.push(self.classifier.weight.as_slice());
        out.push(&self.classifier.bias);
        out
    }
}
