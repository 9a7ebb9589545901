use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{Normalization, SplitSpec};
use crate::error::{Error, Result};
use crate::hard_concrete::HardConcrete;
use crate::perturb::{Method, Mode, PerturbationSpec};
use crate::train::{OptimizerConfig, Schedule, TrainConfig};

pub const SEED_ENV: &str = "XPERT_SEED";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Moons,
    Mnist,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodName {
    Mle,
    AtL2,
    AtLinf,
    Vat,
    Xat,
    Xvat,
}

impl MethodName {
    pub fn perturbation(self) -> Option<Method> {
        match self {
            MethodName::Mle => None,
            MethodName::AtL2 => Some(Method::AtL2),
            MethodName::AtLinf => Some(Method::AtLinf),
            MethodName::Vat => Some(Method::Vat),
            MethodName::Xat => Some(Method::Xat),
            MethodName::Xvat => Some(Method::Xvat),
        }
    }

    fn is_multiplicative(self) -> bool {
        self.perturbation().is_some_and(Method::is_multiplicative)
    }

    /// VAT and xVAT train on unlabeled data.
    fn uses_unlabeled(self) -> bool {
        self.perturbation().is_some_and(|m| !m.is_supervised())
    }
}

/// An experiment description as written by hand: everything except the
/// dataset, method and output directory may be left out.
///
/// [`resolve`](Self::resolve) fills the gaps with per-dataset defaults; the
/// result serializes back to a config that parses to the same experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetKind,
    pub method: MethodName,
    pub output_dir: PathBuf,
    /// xAT/xVAT only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mode: Option<Mode>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub power_iterations: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub xi: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hard_concrete: Option<HardConcrete>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<SplitSpec>,
    /// Hidden layer widths of the classifier MLP.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hidden: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub batch_labeled: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub batch_unlabeled: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub classifier_optimizer: Option<OptimizerConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_optimizer: Option<OptimizerConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub iterations: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval_every: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// Moons: noise standard deviation.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise_sd: Option<f64>,
    /// Moons: test set size.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_test: Option<usize>,
    /// Moons: draw the unlabeled points from the test set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub unlabeled_from_test: Option<bool>,
    /// MNIST: directory holding the four IDX files.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data_dir: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub normalization: Option<Normalization>,
    /// Store elapsed milliseconds in `metrics.csv`; zeros otherwise, so that
    /// reruns are byte-identical.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub record_wall_time: Option<bool>,
    /// Export masks for `mask_export_indices` of the test set every this many
    /// iterations (multiplicative inductive methods).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_export_every: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_export_indices: Option<Vec<usize>>,
}

impl ExperimentConfig {
    pub fn new(dataset: DatasetKind, method: MethodName, output_dir: impl Into<PathBuf>) -> Self {
        Self {
            dataset,
            method,
            output_dir: output_dir.into(),
            mode: None,
            epsilon: None,
            lambda: None,
            eta: None,
            power_iterations: None,
            xi: None,
            hard_concrete: None,
            split: None,
            hidden: None,
            batch_labeled: None,
            batch_unlabeled: None,
            classifier_optimizer: None,
            mask_optimizer: None,
            iterations: None,
            eval_every: None,
            seed: None,
            noise_sd: None,
            n_test: None,
            unlabeled_from_test: None,
            data_dir: None,
            normalization: None,
            record_wall_time: None,
            mask_export_every: None,
            mask_export_indices: None,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Reads a config file and applies the seed override from the environment.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_json(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        if let Ok(v) = std::env::var(SEED_ENV) {
            let seed = v
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer")))?;
            cfg.seed = Some(seed);
        }
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }

    /// Fills every applicable field with its default and validates the result.
    pub fn resolve(&self) -> Result<ExperimentConfig> {
        let mut c = self.clone();
        let method = c.method;
        let moons = c.dataset == DatasetKind::Moons;
        let multiplicative = method.is_multiplicative();

        if c.mode.is_some() && !multiplicative {
            return Err(Error::Config(format!("mode applies only to xat/xvat, not {method:?}")));
        }
        let seed = *c.seed.get_or_insert(0);
        if multiplicative {
            c.mode.get_or_insert(Mode::Inductive);
        }
        c.epsilon.get_or_insert(match (method, moons) {
            (MethodName::Xat | MethodName::Xvat, true) => 1.5,
            (MethodName::Xat | MethodName::Xvat, false) => 1.0,
            (MethodName::Vat, true) => 0.2,
            (MethodName::Vat, false) => 0.3,
            (MethodName::AtL2, true) => 0.5,
            (MethodName::AtL2, false) => 2.0,
            (MethodName::AtLinf, _) => 0.1,
            (MethodName::Mle, _) => 0.0,
        });
        if method == MethodName::Mle {
            c.epsilon = None;
        }
        c.eta.get_or_insert(match method {
            MethodName::Mle => 0.0,
            MethodName::Xat => 0.5,
            _ => 1.0,
        });
        if multiplicative {
            c.lambda.get_or_insert(1.0);
            c.hard_concrete.get_or_insert_with(HardConcrete::default);
        } else {
            c.lambda = None;
            c.hard_concrete = None;
        }
        if method == MethodName::Vat {
            c.power_iterations.get_or_insert(1);
            c.xi.get_or_insert(1e-6);
        } else {
            c.power_iterations = None;
            c.xi = None;
        }

        if moons {
            c.split.get_or_insert(SplitSpec {
                n_labeled: 16,
                n_unlabeled: 500,
                seed,
            });
            c.hidden.get_or_insert_with(|| vec![100, 100]);
            c.batch_labeled.get_or_insert(16);
            c.batch_unlabeled.get_or_insert(64);
            c.classifier_optimizer.get_or_insert(OptimizerConfig::adam(0.01));
            c.iterations.get_or_insert(2000);
            c.eval_every.get_or_insert(100);
            c.noise_sd.get_or_insert(0.1);
            c.n_test.get_or_insert(1000);
            c.unlabeled_from_test.get_or_insert(true);
            c.normalization.get_or_insert(Normalization::Raw);
            if c.data_dir.is_some() {
                return Err(Error::Config("data_dir does not apply to moons".into()));
            }
        } else {
            c.split.get_or_insert(SplitSpec {
                n_labeled: 100,
                n_unlabeled: 7900,
                seed,
            });
            c.hidden.get_or_insert_with(|| vec![256, 128]);
            c.batch_labeled.get_or_insert(100);
            c.batch_unlabeled.get_or_insert(250);
            c.classifier_optimizer.get_or_insert(
                OptimizerConfig::adam(2e-3).with_schedule(Schedule::StepDecay { factor: 0.9, every: 500 }),
            );
            c.iterations.get_or_insert(5000);
            c.eval_every.get_or_insert(500);
            c.data_dir.get_or_insert_with(|| PathBuf::from("data/mnist10k"));
            c.normalization.get_or_insert(if multiplicative {
                Normalization::CenterHalf
            } else {
                Normalization::Unit
            });
            if c.noise_sd.is_some() || c.n_test.is_some() || c.unlabeled_from_test.is_some() {
                return Err(Error::Config("noise_sd, n_test and unlabeled_from_test apply only to moons".into()));
            }
        }
        if multiplicative {
            let transductive = c.mode == Some(Mode::Transductive);
            c.mask_optimizer.get_or_insert(match (transductive, moons) {
                (true, _) => OptimizerConfig::sgd(1e-3),
                (false, true) => OptimizerConfig::adam(1e-3),
                (false, false) => OptimizerConfig::adam(2e-6),
            });
        } else {
            c.mask_optimizer = None;
        }
        if !method.uses_unlabeled() {
            c.batch_unlabeled = None;
        }
        c.record_wall_time.get_or_insert(false);
        if c.mask_export_every.is_some() {
            c.mask_export_indices.get_or_insert_with(|| vec![0, 1, 2]);
        }
        c.validate()?;
        Ok(c)
    }

    fn validate(&self) -> Result<()> {
        let field = |name: &str, ok: bool, detail: String| {
            if ok {
                Ok(())
            } else {
                Err(Error::Config(format!("{name}: {detail}")))
            }
        };
        let hidden = self.hidden.as_deref().unwrap_or_default();
        field("hidden", hidden.iter().all(|&w| w > 0), format!("widths must be positive, got {hidden:?}"))?;
        field("eval_every", self.eval_every != Some(0), "must be at least 1".into())?;
        field("batch_unlabeled", self.batch_unlabeled != Some(0), "must be at least 1".into())?;
        if let Some(split) = &self.split {
            if self.method.uses_unlabeled() && split.n_unlabeled == 0 {
                return Err(Error::Config(format!("split.n_unlabeled: {:?} needs unlabeled data", self.method)));
            }
            if let Some(b) = self.batch_labeled {
                field("batch_labeled", b <= split.n_labeled, format!("{b} exceeds n_labeled {}", split.n_labeled))?;
            }
        }
        if let Some(n) = self.mask_export_every {
            field("mask_export_every", n > 0, "must be at least 1".into())?;
            field(
                "mask_export_every",
                self.mode == Some(Mode::Inductive),
                "periodic export needs an inductive mask generator".into(),
            )?;
        }
        self.train_config()?.validate()
    }

    /// Training settings of a resolved config.
    pub fn train_config(&self) -> Result<TrainConfig> {
        let missing = |name: &str| Error::Config(format!("{name} is unset; resolve the config first"));
        let perturbation = match self.method.perturbation() {
            None => None,
            Some(method) => {
                let mut spec = PerturbationSpec::new(method, self.epsilon.ok_or_else(|| missing("epsilon"))?);
                spec.mode = self.mode.unwrap_or_default();
                spec.lambda = self.lambda.unwrap_or(spec.lambda);
                spec.power_iterations = self.power_iterations.unwrap_or(spec.power_iterations);
                spec.xi = self.xi.unwrap_or(spec.xi);
                spec.hard_concrete = self.hard_concrete.unwrap_or_default();
                Some(spec)
            }
        };
        let classifier_optimizer = self.classifier_optimizer.ok_or_else(|| missing("classifier_optimizer"))?;
        Ok(TrainConfig {
            perturbation,
            eta: self.eta.ok_or_else(|| missing("eta"))?,
            batch_labeled: self.batch_labeled.ok_or_else(|| missing("batch_labeled"))?,
            batch_unlabeled: self.batch_unlabeled.unwrap_or(0),
            iterations: self.iterations.ok_or_else(|| missing("iterations"))?,
            classifier_optimizer,
            mask_optimizer: self.mask_optimizer.unwrap_or(OptimizerConfig::sgd(0.0)),
            seed: self.seed.ok_or_else(|| missing("seed"))?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resolved_config_round_trips() {
        let cfg = ExperimentConfig::from_json(r#"{"dataset":"moons","method":"xvat","output_dir":"out"}"#).unwrap();
        let r = cfg.resolve().unwrap();
        assert_eq!(r.mode, Some(Mode::Inductive));
        assert_eq!(r.lambda, Some(1.0));
        let again = ExperimentConfig::from_json(&r.to_json()).unwrap();
        assert_eq!(again, r);
        assert_eq!(again.resolve().unwrap(), r);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = ExperimentConfig::from_json(r#"{"dataset":"moons","method":"mle","output_dir":"o","lamda":1}"#)
            .unwrap_err();
        assert!(err.to_string().contains("lamda"), "{err}");
    }

    #[test]
    fn mode_only_for_multiplicative_methods() {
        let mut cfg = ExperimentConfig::new(DatasetKind::Moons, MethodName::Vat, "o");
        cfg.mode = Some(Mode::Inductive);
        assert!(matches!(cfg.resolve(), Err(Error::Config(_))));
    }

    #[test]
    fn field_errors_name_the_field() {
        let mut cfg = ExperimentConfig::new(DatasetKind::Moons, MethodName::Mle, "o");
        cfg.eval_every = Some(0);
        assert!(cfg.resolve().unwrap_err().to_string().contains("eval_every"));
    }

    #[test]
    fn mnist_defaults() {
        let r = ExperimentConfig::new(DatasetKind::Mnist, MethodName::Xvat, "o").resolve().unwrap();
        assert_eq!(r.hidden, Some(vec![256, 128]));
        assert_eq!(r.normalization, Some(Normalization::CenterHalf));
        assert_eq!(r.mask_optimizer, Some(OptimizerConfig::adam(2e-6)));
        let t = ExperimentConfig::new(DatasetKind::Mnist, MethodName::Mle, "o").resolve().unwrap();
        assert_eq!(t.batch_unlabeled, None);
        assert_eq!(t.normalization, Some(Normalization::Unit));
    }
}
