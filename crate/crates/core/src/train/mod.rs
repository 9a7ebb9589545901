//! The semi-supervised objective, optimizers and the joint training step.
//!
//! For xAT/xVAT a single backward pass updates both the classifier and the
//! mask parameters. The classifier descends the combined loss; the mask
//! parameters see the same graph through a gradient-reversal node, so their
//! descent step is an ascent step on the mask objective.

mod optim;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Batch, Dataset};
use crate::error::{Error, Result};
use crate::hard_concrete::{draw_uniform, l0_surrogate, sample_mask_var};
use crate::nn::{cross_entropy, one_hot, BoundClassifier, Classifier, MaskGenerator, Parameterized};
use crate::perturb::{
    at_perturbation, consistency_against, make_masked_input, vat_perturbation, xadv_objective, Method, Mode,
    PerturbationSpec, Target, TransductiveTable,
};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub use optim::{
    adam_update, sgd_update, AdamState, Optimizer, OptimizerConfig, OptimizerKind, Schedule, ADAM_BETA1,
    ADAM_BETA2, ADAM_EPS,
};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    /// `None` trains on labeled cross-entropy alone.
    pub perturbation: Option<PerturbationSpec>,
    /// Weight of the consistency term.
    pub eta: f64,
    pub batch_labeled: usize,
    pub batch_unlabeled: usize,
    pub iterations: usize,
    pub classifier_optimizer: OptimizerConfig,
    /// Generator parameters (inductive) or the `log α` table (transductive).
    pub mask_optimizer: OptimizerConfig,
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return Err(Error::Config(format!("eta must be non-negative, got {}", self.eta)));
        }
        if self.batch_labeled == 0 || self.iterations == 0 {
            return Err(Error::Config("batch_labeled and iterations must be at least 1".into()));
        }
        if let Some(spec) = &self.perturbation {
            spec.validate().map_err(|e| Error::Config(e.to_string()))?;
        }
        self.classifier_optimizer.validate()?;
        self.mask_optimizer.validate()
    }

    pub fn method(&self) -> Option<Method> {
        self.perturbation.map(|p| p.method)
    }
}

/// Where `log α` comes from.
#[derive(Clone, Debug, PartialEq)]
pub enum MaskSource {
    None,
    Transductive(TransductiveTable),
    Inductive(MaskGenerator),
}

/// Per-step diagnostics.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub loss: f64,
    pub ce: f64,
    /// Mean consistency divergence (zero without a regularizer).
    pub xadv: f64,
    /// Mean sampled gate value, for multiplicative methods.
    pub mask_activity: Option<f64>,
    pub forwards: usize,
    pub backwards: usize,
}

/// The regularizer's input on the current tape.
#[derive(Clone, Copy, Debug)]
pub enum Regularizer<'a, 't> {
    None,
    /// A precomputed additive perturbation over the consistency rows.
    Additive { r: &'a Tensor },
    /// Mask logits and uniform noise over the consistency rows.
    Multiplicative { log_alpha: Var<'t>, u: &'a Tensor },
}

#[derive(Clone, Copy, Debug)]
pub struct LossTerms<'t> {
    pub total: Var<'t>,
    pub ce: f64,
    pub consistency: f64,
    pub mask_activity: Option<f64>,
}

/// Inputs that receive a perturbation: only labeled rows for AT/xAT, labeled
/// followed by unlabeled rows for VAT/xVAT.
pub fn consistency_rows(batch: &Batch, method: Method) -> Result<Tensor> {
    match (&batch.unlabeled_x, method.is_supervised()) {
        (Some(u), false) => Tensor::concat_rows(&[&batch.labeled_x, u]),
        _ => Ok(batch.labeled_x.clone()),
    }
}

/// Mean labeled cross-entropy plus `eta` times the mean consistency loss.
///
/// The L0 penalty of the mask objective is added with zero value (`l − stop(l)`)
/// so the returned loss equals the classifier objective while `log α` still
/// receives the penalty's gradient.
pub fn combined_loss<'t>(
    tape: &'t Tape,
    model: &BoundClassifier<'t>,
    batch: &Batch,
    spec: Option<&PerturbationSpec>,
    regularizer: Regularizer<'_, 't>,
    eta: f64,
) -> Result<LossTerms<'t>> {
    let nl = batch.labels.len();
    if nl == 0 || batch.labeled_x.rows() != nl {
        return Err(Error::Contract("labeled batch must be nonempty and match its labels".into()));
    }
    let rows = match spec {
        Some(s) => consistency_rows(batch, s.method)?,
        None => batch.labeled_x.clone(),
    };
    let (labeled_probs, probs) = model.probabilities_tracking(&rows, nl)?;
    let h = one_hot(&batch.labels, probs.shape()[1])?;
    let ce = cross_entropy(&h, labeled_probs)?;
    let ce_value = ce.item()?;
    let target = |s: &PerturbationSpec| {
        if s.method.is_supervised() {
            Target::Labels(&h)
        } else {
            Target::Clean(probs)
        }
    };

    let (reg, consistency, mask_activity) = match (spec, regularizer) {
        (None, Regularizer::None) => return Ok(LossTerms {
            total: ce,
            ce: ce_value,
            consistency: 0.0,
            mask_activity: None,
        }),
        (Some(s), Regularizer::Additive { r }) if !s.method.is_multiplicative() => {
            let x_pert = tape.constant(rows.zip_map(r, |a, b| a + b)?);
            let d = consistency_against(target(s), x_pert, model)?;
            (d, d.item()?, None)
        }
        (Some(s), Regularizer::Multiplicative { log_alpha, u }) if s.method.is_multiplicative() => {
            let z = sample_mask_var(log_alpha, u, &s.hard_concrete)?;
            let activity = z.value().mean();
            let x_pert = make_masked_input(&rows, z, s.epsilon)?;
            let d = consistency_against(target(s), x_pert, model)?;
            let penalty = l0_surrogate(log_alpha, &s.hard_concrete)?.scale(s.lambda / rows.rows() as f64)?;
            let zero_valued = penalty.sub(penalty.detach())?;
            (d.add(zero_valued)?, d.item()?, Some(activity))
        }
        _ => return Err(Error::Contract("regularizer does not match the perturbation method".into())),
    };
    Ok(LossTerms {
        total: ce.add(reg.scale(eta)?)?,
        ce: ce_value,
        consistency,
        mask_activity,
    })
}

/// Clean-input accuracy.
pub fn evaluate(model: &Classifier, test: &Dataset) -> Result<f64> {
    let labels = test.labels()?;
    if labels.is_empty() {
        return Err(Error::Contract("test set is empty".into()));
    }
    const CHUNK: usize = 1024;
    let mut correct = 0usize;
    for start in (0..labels.len()).step_by(CHUNK) {
        let ids: Vec<usize> = (start..(start + CHUNK).min(labels.len())).collect();
        let pred = model.predict(&test.examples.select_rows(&ids)?)?;
        correct += pred.iter().zip(&ids).filter(|(p, &i)| **p == labels[i]).count();
    }
    Ok(correct as f64 / labels.len() as f64)
}

fn annotate(iteration: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::NonFinite { op } => Error::Diverged {
            iteration,
            detail: format!("non-finite value produced by {op}"),
        },
        other => other,
    }
}

/// Owns the models and optimizer state for one training run.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub classifier: Classifier,
    pub mask: MaskSource,
    config: TrainConfig,
    classifier_opt: Optimizer,
    mask_opt: Optimizer,
    rng: ChaCha8Rng,
    iteration: usize,
    labeled_pool: usize,
}

struct Grads {
    classifier: Vec<Tensor>,
    mask: MaskGrads,
}

enum MaskGrads {
    None,
    Rows { ids: Vec<usize>, grad: Tensor },
    Generator(Vec<Tensor>),
}

impl Trainer {
    /// `labeled_pool` is the size of the labeled set; transductive table rows
    /// `0..labeled_pool` belong to labeled examples and the rest, in order, to
    /// unlabeled ones.
    pub fn new(classifier: Classifier, mask: MaskSource, config: TrainConfig, labeled_pool: usize) -> Result<Self> {
        config.validate()?;
        let method = config.method();
        match (&mask, method) {
            (MaskSource::None, Some(m)) if m.is_multiplicative() => {
                return Err(Error::Config(format!("{m:?} needs a mask generator or table")));
            }
            (MaskSource::Transductive(t), Some(_)) => {
                if t.len() < labeled_pool || t.log_alpha.row_len() != classifier.input_dim() {
                    return Err(Error::Config("transductive table does not cover the training set".into()));
                }
                if config.mask_optimizer.kind != OptimizerKind::Sgd {
                    return Err(Error::Config("transductive log α is optimized with sgd".into()));
                }
            }
            (MaskSource::Inductive(g), Some(_)) if g.input_len() != classifier.input_dim() => {
                return Err(Error::Config("generator input length differs from classifier input".into()));
            }
            _ => {}
        }
        Ok(Self {
            classifier_opt: Optimizer::new(config.classifier_optimizer)?,
            mask_opt: Optimizer::new(config.mask_optimizer)?,
            rng: {
                let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
                rng.set_stream(3);
                rng
            },
            classifier,
            mask,
            config,
            iteration: 0,
            labeled_pool,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    /// One forward/backward pass and one update of every trainable parameter set.
    pub fn train_step(&mut self, batch: &Batch) -> Result<StepMetrics> {
        let it = self.iteration;
        let (metrics, grads) = self.gradients(batch).map_err(annotate(it))?;
        if !metrics.loss.is_finite() {
            return Err(Error::Diverged {
                iteration: it,
                detail: format!("loss = {}, ce = {}, xadv = {}", metrics.loss, metrics.ce, metrics.xadv),
            });
        }
        self.classifier_opt
            .step(self.classifier.parameters_mut(), &grads.classifier, it)?;
        match (grads.mask, &mut self.mask) {
            (MaskGrads::Rows { ids, grad }, MaskSource::Transductive(table)) => {
                table.lr = self.mask_opt.lr_at(it);
                table.apply_gradient(&ids, &grad)?;
            }
            (MaskGrads::Generator(g), MaskSource::Inductive(gen)) => {
                self.mask_opt.step(gen.parameters_mut(), &g, it)?;
            }
            _ => {}
        }
        self.iteration += 1;
        Ok(metrics)
    }

    fn gradients(&mut self, batch: &Batch) -> Result<(StepMetrics, Grads)> {
        let eta = self.config.eta;
        let tape = Tape::new();
        let Some(spec) = self.config.perturbation else {
            let bound = self.classifier.bind(&tape, true);
            let terms = combined_loss(&tape, &bound, batch, None, Regularizer::None, eta)?;
            terms.total.backward()?;
            let metrics = metrics(&terms, bound.forwards(), 1)?;
            return Ok((metrics, Grads { classifier: bound.grads(), mask: MaskGrads::None }));
        };
        let rows = consistency_rows(batch, spec.method)?;

        if !spec.method.is_multiplicative() {
            let pert = match spec.method {
                Method::Vat => vat_perturbation(&rows, &self.classifier, &spec, &mut self.rng)?,
                _ => {
                    let h = one_hot(&batch.labels, self.classifier.num_classes())?;
                    at_perturbation(&rows, &h, &self.classifier, &spec)?
                }
            };
            let bound = self.classifier.bind(&tape, true);
            let terms = combined_loss(&tape, &bound, batch, Some(&spec), Regularizer::Additive { r: &pert.r }, eta)?;
            terms.total.backward()?;
            let metrics = metrics(&terms, pert.forwards + bound.forwards(), pert.backwards + 1)?;
            return Ok((metrics, Grads { classifier: bound.grads(), mask: MaskGrads::None }));
        }

        let u = draw_uniform(rows.shape(), &mut self.rng)?;
        let n = rows.rows() as f64;
        let bound = self.classifier.bind(&tape, true);
        let (log_alpha, source) = match &self.mask {
            MaskSource::Inductive(g) => {
                let bg = g.bind(&tape, true);
                let la = bg.forward(tape.constant(rows.clone()))?;
                let scale = if eta > 0.0 { 1.0 / eta } else { 1.0 };
                (la.reverse_grad(scale)?, Ok(bg))
            }
            MaskSource::Transductive(table) => {
                let mut ids = batch.labeled_ids.clone();
                if rows.rows() > ids.len() {
                    ids.extend(batch.unlabeled_ids.iter().map(|&j| self.labeled_pool + j));
                }
                let leaf = tape.param(table.rows(&ids)?);
                let scale = if eta > 0.0 { n / eta } else { 1.0 };
                (leaf.reverse_grad(scale)?, Err((leaf, ids)))
            }
            MaskSource::None => return Err(Error::Contract("no mask source".into())),
        };
        let terms = combined_loss(
            &tape,
            &bound,
            batch,
            Some(&spec),
            Regularizer::Multiplicative { log_alpha, u: &u },
            eta,
        )?;
        terms.total.backward()?;
        let mask = match source {
            Ok(bg) => MaskGrads::Generator(bg.grads()),
            Err((leaf, ids)) => MaskGrads::Rows {
                grad: leaf.grad().unwrap_or_else(|| leaf.value().map(|_| 0.0)),
                ids,
            },
        };
        let metrics = metrics(&terms, bound.forwards(), 1)?;
        Ok((metrics, Grads { classifier: bound.grads(), mask }))
    }
}

fn metrics(terms: &LossTerms<'_>, forwards: usize, backwards: usize) -> Result<StepMetrics> {
    Ok(StepMetrics {
        loss: terms.total.item()?,
        ce: terms.ce,
        xadv: terms.consistency,
        mask_activity: terms.mask_activity,
        forwards,
        backwards,
    })
}

/// Monte Carlo estimate of the per-example mask objective
/// `E_u[ΔD] + λ·Σ P(z > 0)` at fixed `log α`.
pub fn mask_objective<R: Rng + ?Sized>(
    x: &Tensor,
    model: &Classifier,
    log_alpha: &Tensor,
    spec: &PerturbationSpec,
    y_onehot: Option<&Tensor>,
    samples: usize,
    rng: &mut R,
) -> Result<f64> {
    if samples == 0 {
        return Err(Error::Contract("samples must be at least 1".into()));
    }
    let mut total = 0.0;
    for _ in 0..samples {
        let tape = Tape::new();
        let bound = model.bind(&tape, false);
        let u = draw_uniform(x.shape(), rng)?;
        total += xadv_objective(x, &bound, tape.constant(log_alpha.clone()), &u, spec, y_onehot)?.item()?;
    }
    Ok(total / samples as f64)
}

/// Gradient ascent on `log α` with the classifier frozen.
///
/// Each step averages the objective over `samples` noise draws. Returns the
/// final `log α` and the per-step objective estimates.
#[allow(clippy::too_many_arguments)]
pub fn ascend_log_alpha<R: Rng + ?Sized>(
    x: &Tensor,
    model: &Classifier,
    spec: &PerturbationSpec,
    y_onehot: Option<&Tensor>,
    init: Tensor,
    steps: usize,
    optimizer: OptimizerConfig,
    samples: usize,
    rng: &mut R,
) -> Result<(Tensor, Vec<f64>)> {
    if samples == 0 {
        return Err(Error::Contract("samples must be at least 1".into()));
    }
    x.expect_same_shape(&init, "ascend_log_alpha")?;
    let mut opt = Optimizer::new(optimizer)?;
    let mut log_alpha = init;
    let mut history = Vec::with_capacity(steps);
    for step in 0..steps {
        let tape = Tape::new();
        let bound = model.bind(&tape, false);
        let la = tape.param(log_alpha.clone());
        let mut objective: Option<Var<'_>> = None;
        for _ in 0..samples {
            let u = draw_uniform(x.shape(), rng)?;
            let o = xadv_objective(x, &bound, la, &u, spec, y_onehot)?;
            objective = Some(match objective {
                Some(acc) => acc.add(o)?,
                None => o,
            });
        }
        let objective = objective.expect("samples >= 1").scale(1.0 / samples as f64)?;
        history.push(objective.item()?);
        objective.neg()?.backward()?;
        let grad = la.grad().unwrap_or_else(|| log_alpha.map(|_| 0.0));
        opt.step(vec![&mut log_alpha], &[grad], step)?;
    }
    Ok((log_alpha, history))
}

/// Mode-dependent default for a fresh mask source: a `N(0, 1)` table, or a
/// zero-weight generator whose first masks are uniform over the input.
pub fn default_mask_source<R: Rng + ?Sized>(
    spec: Option<&PerturbationSpec>,
    sample_shape: &[usize],
    table_rows: usize,
    table_lr: f64,
    rng: &mut R,
) -> Result<MaskSource> {
    let Some(spec) = spec.filter(|s| s.method.is_multiplicative()) else {
        return Ok(MaskSource::None);
    };
    let p: usize = sample_shape.iter().product();
    match spec.mode {
        Mode::Transductive => Ok(MaskSource::Transductive(TransductiveTable::gaussian(
            table_rows, p, table_lr, rng,
        )?)),
        Mode::Inductive => Ok(MaskSource::Inductive(match *sample_shape {
            [c, h, w] if h >= 3 && w >= 3 => MaskGenerator::conv_zeroed([c, h, w])?,
            _ => MaskGenerator::dense_zeroed(p)?,
        })),
    }
}
