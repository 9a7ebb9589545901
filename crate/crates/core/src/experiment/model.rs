use std::path::Path;

use crate::data::Normalization;
use crate::error::{Error, Result};
use crate::hard_concrete::{eval_mask, HardConcrete, HardConcreteParams};
use crate::nn::{Activation, Checkpoint, Classifier, DenseLayer, MaskGenerator, Parameterized};
use crate::tensor::Tensor;

/// How transductive `log α` rows are stored: the table and the training
/// inputs they belong to, in the same row order.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskTable {
    pub log_alpha: Tensor,
    pub inputs: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub enum TrainedMask {
    None,
    Table(MaskTable),
    Generator(MaskGenerator),
}

/// Everything needed to predict and to draw evaluation masks after training.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainedModel {
    pub classifier: Classifier,
    pub mask: TrainedMask,
    pub epsilon: f64,
    pub hard_concrete: HardConcrete,
    pub sample_shape: Vec<usize>,
    pub normalization: Normalization,
}

fn normalization_code(n: Normalization) -> f64 {
    match n {
        Normalization::Raw => 0.0,
        Normalization::Unit => 1.0,
        Normalization::CenterHalf => 2.0,
    }
}

fn normalization_from_code(v: f64) -> Result<Normalization> {
    match v as i64 {
        0 => Ok(Normalization::Raw),
        1 => Ok(Normalization::Unit),
        2 => Ok(Normalization::CenterHalf),
        _ => Err(Error::Contract(format!("unknown normalization code {v}"))),
    }
}

impl TrainedModel {
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new();
        for (name, t) in self.classifier.named_parameters() {
            ck.insert(name, t.clone());
        }
        match &self.mask {
            TrainedMask::None => {}
            TrainedMask::Table(t) => {
                ck.insert("mask.log_alpha", t.log_alpha.clone());
                ck.insert("mask.inputs", t.inputs.clone());
            }
            TrainedMask::Generator(g) => {
                for (name, t) in g.named_parameters() {
                    ck.insert(name, t.clone());
                }
            }
        }
        let hc = self.hard_concrete;
        ck.insert("meta.epsilon", Tensor::scalar(self.epsilon));
        ck.insert(
            "meta.hard_concrete",
            Tensor::new(vec![3], vec![hc.beta, hc.gamma, hc.zeta]).expect("3 values"),
        );
        let shape = self.sample_shape.iter().map(|&d| d as f64).collect::<Vec<_>>();
        ck.insert("meta.sample_shape", Tensor::new(vec![shape.len()], shape).expect("nonempty shape"));
        ck.insert("meta.normalization", Tensor::scalar(normalization_code(self.normalization)));
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let mut layers = Vec::new();
        while let Some(w) = ck.get(&format!("classifier.{}.weight", layers.len())) {
            let b = ck.require(&format!("classifier.{}.bias", layers.len()))?;
            layers.push(DenseLayer::new(w.clone(), b.clone(), Activation::Relu)?);
        }
        let last = layers
            .last_mut()
            .ok_or_else(|| Error::NotFound("checkpoint holds no classifier layers".into()))?;
        last.activation = Activation::Identity;
        let classifier = Classifier::new(layers)?;

        let sample_shape: Vec<usize> = ck.require("meta.sample_shape")?.data().iter().map(|&d| d as usize).collect();
        let mask = if let Some(log_alpha) = ck.get("mask.log_alpha") {
            TrainedMask::Table(MaskTable {
                log_alpha: log_alpha.clone(),
                inputs: ck.require("mask.inputs")?.clone(),
            })
        } else if let Some(kernel) = ck.get("generator.kernel") {
            let &[c, h, w] = sample_shape.as_slice() else {
                return Err(Error::Contract(format!("conv generator needs a C×H×W sample shape, got {sample_shape:?}")));
            };
            TrainedMask::Generator(MaskGenerator::Conv {
                kernel: kernel.clone(),
                bias: ck.require("generator.bias")?.clone(),
                image: [c, h, w],
            })
        } else if let Some(weight) = ck.get("generator.weight") {
            TrainedMask::Generator(MaskGenerator::Dense(DenseLayer::new(
                weight.clone(),
                ck.require("generator.bias")?.clone(),
                Activation::Identity,
            )?))
        } else {
            TrainedMask::None
        };
        let hc = ck.require("meta.hard_concrete")?.data();
        if hc.len() != 3 {
            return Err(Error::Contract("meta.hard_concrete must hold 3 values".into()));
        }
        let model = Self {
            classifier,
            mask,
            epsilon: ck.require("meta.epsilon")?.item()?,
            hard_concrete: HardConcrete::new(hc[0], hc[1], hc[2])?,
            sample_shape,
            normalization: normalization_from_code(ck.require("meta.normalization")?.item()?)?,
        };
        if model.sample_shape.iter().product::<usize>() != model.classifier.input_dim() {
            return Err(Error::Contract("meta.sample_shape does not match the classifier input".into()));
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }

    /// `log α` for inputs, from the generator.
    pub fn log_alpha(&self, x: &Tensor) -> Result<Tensor> {
        match &self.mask {
            TrainedMask::Generator(g) => g.log_alpha(x),
            TrainedMask::Table(_) => Err(Error::Contract(
                "transductive masks exist only for training rows".into(),
            )),
            TrainedMask::None => Err(Error::Contract("model has no mask parameters".into())),
        }
    }

    /// Deterministic evaluation mask for the given `log α`.
    pub fn eval_mask(&self, log_alpha: &Tensor) -> Result<Tensor> {
        Ok(eval_mask(&HardConcreteParams::new(log_alpha.clone(), self.hard_concrete)?))
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn checkpoint_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let model = TrainedModel {
            classifier: Classifier::mlp(&[9, 4, 3], &mut rng).unwrap(),
            mask: TrainedMask::Generator(MaskGenerator::conv([1, 3, 3], &mut rng).unwrap()),
            epsilon: 1.5,
            hard_concrete: HardConcrete::default(),
            sample_shape: vec![1, 3, 3],
            normalization: Normalization::CenterHalf,
        };
        let back = TrainedModel::from_checkpoint(&model.to_checkpoint()).unwrap();
        assert_eq!(back, model);
    }
}
