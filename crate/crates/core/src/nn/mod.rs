//! Classifier and mask-generator networks.
//!
//! Parameters live in plain [`Tensor`]s owned by the model structs. To
//! differentiate, a model is *bound* to a [`Tape`], which records its
//! parameters as leaves; after the backward pass the bound model hands the
//! gradients back in the same order as [`Parameterized::parameters_mut`].

mod checkpoint;
mod loss;

use std::cell::Cell;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use loss::{cross_entropy, kl_divergence, one_hot, PROB_FLOOR};

/// Models whose parameters an optimizer can update.
pub trait Parameterized {
    fn named_parameters(&self) -> Vec<(String, &Tensor)>;
    fn parameters_mut(&mut self) -> Vec<&mut Tensor>;

    fn parameter_count(&self) -> usize {
        self.named_parameters().iter().map(|(_, t)| t.len()).sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Identity,
}

/// Fully connected layer computing `act(x·Wᵀ + b)`.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseLayer {
    /// `[out × in]`
    pub weight: Tensor,
    /// `[out]`
    pub bias: Tensor,
    pub activation: Activation,
}

fn he_uniform<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Result<Tensor> {
    let bound = (6.0 / fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| rng.gen_range(-bound..bound))
}

impl DenseLayer {
    pub fn new(weight: Tensor, bias: Tensor, activation: Activation) -> Result<Self> {
        let (out, _) = weight.dims2()?;
        if bias.shape() != [out] {
            return Err(Error::dim(
                "dense_layer",
                format!("bias {:?} for weight {:?}", bias.shape(), weight.shape()),
            ));
        }
        Ok(Self {
            weight,
            bias,
            activation,
        })
    }

    /// He-uniform weights, zero bias.
    pub fn init<R: Rng + ?Sized>(
        fan_in: usize,
        fan_out: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            weight: he_uniform(&[fan_out, fan_in], fan_in, rng)?,
            bias: Tensor::zeros(&[fan_out])?,
            activation,
        })
    }

    pub fn fan_in(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn fan_out(&self) -> usize {
        self.weight.shape()[0]
    }
}

/// Multi-layer perceptron producing `K` logits.
#[derive(Clone, Debug, PartialEq)]
pub struct Classifier {
    layers: Vec<DenseLayer>,
}

impl Classifier {
    pub fn new(layers: Vec<DenseLayer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Contract("classifier needs at least one layer".into()));
        }
        for pair in layers.windows(2) {
            if pair[0].fan_out() != pair[1].fan_in() {
                return Err(Error::dim(
                    "classifier",
                    format!("layer widths {} and {} do not chain", pair[0].fan_out(), pair[1].fan_in()),
                ));
            }
        }
        if layers[layers.len() - 1].fan_out() < 2 {
            return Err(Error::dim("classifier", "need at least two output classes"));
        }
        Ok(Self { layers })
    }

    /// ReLU MLP with the given widths: `[input, hidden.., classes]`.
    pub fn mlp<R: Rng + ?Sized>(widths: &[usize], rng: &mut R) -> Result<Self> {
        if widths.len() < 2 {
            return Err(Error::Contract("mlp needs an input and an output width".into()));
        }
        let last = widths.len() - 2;
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let act = if i == last { Activation::Identity } else { Activation::Relu };
                DenseLayer::init(w[0], w[1], act, rng)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(layers)
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].fan_in()
    }

    pub fn num_classes(&self) -> usize {
        self.layers[self.layers.len() - 1].fan_out()
    }

    /// Widths `[input, hidden.., classes]`.
    pub fn widths(&self) -> Vec<usize> {
        std::iter::once(self.input_dim())
            .chain(self.layers.iter().map(DenseLayer::fan_out))
            .collect()
    }

    /// Records the parameters on `tape`; constants when `trainable` is false.
    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> BoundClassifier<'t> {
        let leaf = |t: &Tensor| {
            if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        BoundClassifier {
            layers: self
                .layers
                .iter()
                .map(|l| (leaf(&l.weight), leaf(&l.bias), l.activation))
                .collect(),
            forwards: Cell::new(0),
        }
    }

    /// Logits for a batch, without recording gradients.
    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let bound = self.bind(&tape, false);
        let out = bound.forward(tape.constant(x.clone()))?;
        let value = out.value().clone();
        Ok(value)
    }

    pub fn predict_proba(&self, x: &Tensor) -> Result<Tensor> {
        Ok(crate::tape::softmax_rows(&self.logits(x)?))
    }

    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        self.logits(x)?.argmax_rows()
    }
}

impl Parameterized for Classifier {
    fn named_parameters(&self) -> Vec<(String, &Tensor)> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| {
                [
                    (format!("classifier.{i}.weight"), &l.weight),
                    (format!("classifier.{i}.bias"), &l.bias),
                ]
            })
            .collect()
    }

    fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }
}

/// A [`Classifier`] whose parameters are recorded on a tape.
pub struct BoundClassifier<'t> {
    layers: Vec<(Var<'t>, Var<'t>, Activation)>,
    forwards: Cell<usize>,
}

impl<'t> BoundClassifier<'t> {
    /// Logits `[B×K]` for inputs `[B×P]`.
    pub fn forward(&self, x: Var<'t>) -> Result<Var<'t>> {
        self.forwards.set(self.forwards.get() + 1);
        self.logits(x)
    }

    fn logits(&self, x: Var<'t>) -> Result<Var<'t>> {
        let mut h = x;
        for &(w, b, act) in &self.layers {
            h = h.linear(w, b)?;
            if act == Activation::Relu {
                h = h.relu()?;
            }
        }
        Ok(h)
    }

    pub fn probabilities(&self, x: Var<'t>) -> Result<Var<'t>> {
        self.forward(x)?.softmax()
    }

    /// One forward pass over `x` in which only the first `tracked` rows reach
    /// the parameters in backward. Returns those rows' probabilities and a
    /// constant holding the probabilities of every row.
    pub fn probabilities_tracking(&self, x: &Tensor, tracked: usize) -> Result<(Var<'t>, Var<'t>)> {
        let rows = x.rows();
        if tracked == 0 || tracked > rows {
            return Err(Error::Contract(format!("cannot track {tracked} of {rows} rows")));
        }
        self.forwards.set(self.forwards.get() + 1);
        let tape = self.layers[0].0.tape();
        let head = self.logits(tape.constant(x.select_rows(&(0..tracked).collect::<Vec<_>>())?))?.softmax()?;
        if tracked == rows {
            return Ok((head, head.detach()));
        }
        let tail = self.logits(tape.constant(x.select_rows(&(tracked..rows).collect::<Vec<_>>())?))?.softmax()?;
        let joined = Tensor::concat_rows(&[&head.value(), &tail.value()])?;
        Ok((head, tape.constant(joined)))
    }

    /// Number of forward passes run through this binding.
    pub fn forwards(&self) -> usize {
        self.forwards.get()
    }

    /// Parameter gradients after backward, zeros for unreached parameters.
    pub fn grads(&self) -> Vec<Tensor> {
        collect_grads(self.layers.iter().flat_map(|(w, b, _)| [*w, *b]))
    }
}

fn collect_grads<'t>(vars: impl Iterator<Item = Var<'t>>) -> Vec<Tensor> {
    vars.map(|v| {
        v.grad().unwrap_or_else(|| {
            Tensor::zeros(&v.shape()).expect("parameter shapes are non-empty")
        })
    })
    .collect()
}

/// Maps an input to one `log α` per input element.
#[derive(Clone, Debug, PartialEq)]
pub enum MaskGenerator {
    /// One 3×3 filter over a `C×H×W` image plus a scalar bias. The single
    /// output plane is shared across input channels.
    Conv {
        /// `[1 × C × 3 × 3]`
        kernel: Tensor,
        /// `[1]`
        bias: Tensor,
        image: [usize; 3],
    },
    /// Affine `P → P` map for flat feature vectors.
    Dense(DenseLayer),
}

impl MaskGenerator {
    pub fn conv<R: Rng + ?Sized>(image: [usize; 3], rng: &mut R) -> Result<Self> {
        let channels = image[0];
        Ok(Self::Conv {
            kernel: he_uniform(&[1, channels, 3, 3], channels * 9, rng)?,
            bias: Tensor::zeros(&[1])?,
            image,
        })
    }

    pub fn dense<R: Rng + ?Sized>(features: usize, rng: &mut R) -> Result<Self> {
        Ok(Self::Dense(DenseLayer::init(features, features, Activation::Identity, rng)?))
    }

    /// Conv generator with zero weights: `log α ≡ 0`, so every pixel starts
    /// with the same gate distribution.
    pub fn conv_zeroed(image: [usize; 3]) -> Result<Self> {
        Ok(Self::Conv {
            kernel: Tensor::zeros(&[1, image[0], 3, 3])?,
            bias: Tensor::zeros(&[1])?,
            image,
        })
    }

    /// Dense generator with zero weights, `log α ≡ 0`.
    pub fn dense_zeroed(features: usize) -> Result<Self> {
        Ok(Self::Dense(DenseLayer::new(
            Tensor::zeros(&[features, features])?,
            Tensor::zeros(&[features])?,
            Activation::Identity,
        )?))
    }

    /// Flattened input length `P`.
    pub fn input_len(&self) -> usize {
        match self {
            Self::Conv { image, .. } => image.iter().product(),
            Self::Dense(layer) => layer.fan_in(),
        }
    }

    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> BoundGenerator<'t> {
        let leaf = |t: &Tensor| {
            if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        match self {
            Self::Conv {
                kernel,
                bias,
                image,
            } => BoundGenerator::Conv {
                kernel: leaf(kernel),
                bias: leaf(bias),
                image: *image,
            },
            Self::Dense(layer) => BoundGenerator::Dense {
                weight: leaf(&layer.weight),
                bias: leaf(&layer.bias),
            },
        }
    }

    /// `log α` for a batch, without recording gradients.
    pub fn log_alpha(&self, x: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let out = self.bind(&tape, false).forward(tape.constant(x.clone()))?;
        let value = out.value().clone();
        Ok(value)
    }
}

impl Parameterized for MaskGenerator {
    fn named_parameters(&self) -> Vec<(String, &Tensor)> {
        match self {
            Self::Conv { kernel, bias, .. } => vec![
                ("generator.kernel".into(), kernel),
                ("generator.bias".into(), bias),
            ],
            Self::Dense(layer) => vec![
                ("generator.weight".into(), &layer.weight),
                ("generator.bias".into(), &layer.bias),
            ],
        }
    }

    fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            Self::Conv { kernel, bias, .. } => vec![kernel, bias],
            Self::Dense(layer) => vec![&mut layer.weight, &mut layer.bias],
        }
    }
}

pub enum BoundGenerator<'t> {
    Conv {
        kernel: Var<'t>,
        bias: Var<'t>,
        image: [usize; 3],
    },
    Dense {
        weight: Var<'t>,
        bias: Var<'t>,
    },
}

impl<'t> BoundGenerator<'t> {
    /// `log α = G(x)` with the same `[B×P]` shape as `x`.
    pub fn forward(&self, x: Var<'t>) -> Result<Var<'t>> {
        let shape = x.shape();
        let &[batch, p] = shape.as_slice() else {
            return Err(Error::dim("generator", format!("expected [B×P] input, got {shape:?}")));
        };
        match *self {
            Self::Conv {
                kernel,
                bias,
                image: [c, h, w],
            } => {
                if p != c * h * w {
                    return Err(Error::dim(
                        "generator",
                        format!("input length {p} does not match image {c}×{h}×{w}"),
                    ));
                }
                let plane = x
                    .reshape(&[batch, c, h, w])?
                    .conv2d_3x3(kernel)?
                    .add_channel_bias(bias)?
                    .reshape(&[batch, h * w])?;
                if c == 1 {
                    Ok(plane)
                } else {
                    plane.repeat_cols(c)
                }
            }
            Self::Dense { weight, bias } => x.linear(weight, bias),
        }
    }

    pub fn grads(&self) -> Vec<Tensor> {
        match *self {
            Self::Conv { kernel, bias, .. } => collect_grads([kernel, bias].into_iter()),
            Self::Dense { weight, bias } => collect_grads([weight, bias].into_iter()),
        }
    }
}
