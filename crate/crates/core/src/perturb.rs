//! Adversarial perturbations: additive (AT, VAT) and multiplicative (xAT, xVAT).
//!
//! Additive perturbations are built from a gradient with respect to the input
//! and then handed to the training step as plain data. Multiplicative ones are
//! hard concrete masks `z` applied as `x ⊙ εz`; they stay on the tape so the
//! mask parameters and the classifier can be updated from the same backward
//! pass.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hard_concrete::{l0_surrogate, sample_mask_var, HardConcrete};
use crate::nn::{cross_entropy, kl_divergence, BoundClassifier, Classifier};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    AtL2,
    AtLinf,
    Vat,
    Xat,
    Xvat,
}

impl Method {
    pub fn is_multiplicative(self) -> bool {
        matches!(self, Method::Xat | Method::Xvat)
    }

    /// AT and xAT need labels; VAT and xVAT do not.
    pub fn is_supervised(self) -> bool {
        matches!(self, Method::AtL2 | Method::AtLinf | Method::Xat)
    }

    pub fn divergence(self) -> Divergence {
        if self.is_supervised() {
            Divergence::CrossEntropy
        } else {
            Divergence::Kl
        }
    }
}

/// How multiplicative masks are parameterized.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// A free `log α` per training example.
    Transductive,
    /// `log α = G(x)` from a shared generator.
    #[default]
    Inductive,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Divergence {
    Kl,
    CrossEntropy,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PerturbationSpec {
    pub method: Method,
    /// Ignored for additive methods.
    pub mode: Mode,
    pub epsilon: f64,
    /// Weight of the L0 surrogate inside the mask objective.
    pub lambda: f64,
    /// VAT only.
    pub power_iterations: usize,
    /// VAT only: finite-difference radius of the power iteration.
    pub xi: f64,
    pub hard_concrete: HardConcrete,
}

impl PerturbationSpec {
    pub fn new(method: Method, epsilon: f64) -> Self {
        Self {
            method,
            mode: Mode::Inductive,
            epsilon,
            lambda: 1.0,
            power_iterations: 1,
            xi: 1e-6,
            hard_concrete: HardConcrete::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::Contract(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Contract(format!("lambda must be non-negative, got {}", self.lambda)));
        }
        if self.power_iterations == 0 {
            return Err(Error::Contract("power_iterations must be at least 1".into()));
        }
        if !(self.xi > 0.0 && self.xi.is_finite()) {
            return Err(Error::Contract(format!("xi must be positive, got {}", self.xi)));
        }
        self.hard_concrete.validate()
    }
}

/// An additive perturbation with the passes spent building it.
#[derive(Clone, Debug)]
pub struct Perturbation {
    /// Same shape as the input batch.
    pub r: Tensor,
    /// Per example: the gradient was identically zero.
    pub degenerate: Vec<bool>,
    pub forwards: usize,
    pub backwards: usize,
}

impl Perturbation {
    pub fn any_degenerate(&self) -> bool {
        self.degenerate.iter().any(|&d| d)
    }
}

fn require(spec: &PerturbationSpec, ok: bool, what: &str) -> Result<()> {
    spec.validate()?;
    if ok {
        Ok(())
    } else {
        Err(Error::Contract(format!("{what} called with method {:?}", spec.method)))
    }
}

/// One-step AT perturbation `ε·g/‖g‖₂` or `ε·sign(g)`, with
/// `g = ∇ₓ CE(h, p(y|x))` taken per example.
pub fn at_perturbation(
    x: &Tensor,
    y_onehot: &Tensor,
    model: &Classifier,
    spec: &PerturbationSpec,
) -> Result<Perturbation> {
    require(spec, matches!(spec.method, Method::AtL2 | Method::AtLinf), "at_perturbation")?;
    let tape = Tape::new();
    let xv = tape.param(x.clone());
    let bound = model.bind(&tape, false);
    cross_entropy(y_onehot, bound.probabilities(xv)?)?.backward()?;
    let g = xv.grad().ok_or_else(|| Error::Contract("input received no gradient".into()))?;

    let degenerate: Vec<bool> = (0..g.rows()).map(|i| g.row(i).iter().all(|&v| v == 0.0)).collect();
    let r = match spec.method {
        Method::AtL2 => g.normalize_rows_l2().0.scaled(spec.epsilon),
        _ => g.map(|v| {
            if v > 0.0 {
                spec.epsilon
            } else if v < 0.0 {
                -spec.epsilon
            } else {
                0.0
            }
        }),
    };
    Ok(Perturbation {
        r,
        degenerate,
        forwards: bound.forwards(),
        backwards: 1,
    })
}

/// Power iteration on per-row directions.
///
/// Each round evaluates `grad_at(ξ·d)` and renormalizes it row by row. A row
/// whose gradient is exactly zero keeps its previous direction and is flagged.
pub fn power_iteration<F>(d0: Tensor, iterations: usize, xi: f64, mut grad_at: F) -> Result<(Tensor, Vec<bool>)>
where
    F: FnMut(&Tensor) -> Result<Tensor>,
{
    let (mut d, _) = d0.normalize_rows_l2();
    let mut degenerate = vec![false; d.rows()];
    for _ in 0..iterations {
        let g = grad_at(&d.scaled(xi))?;
        d.expect_same_shape(&g, "power_iteration")?;
        let (next, zero) = g.normalize_rows_l2();
        for (i, &z) in zero.iter().enumerate() {
            if z {
                degenerate[i] = true;
            } else {
                d.row_mut(i).copy_from_slice(next.row(i));
            }
        }
    }
    Ok((d, degenerate))
}

/// VAT perturbation `ε·d`, where `d` approximates the dominant direction of
/// `KL(p(y|x), p(y|x + r))` around `r = 0`.
///
/// The clean prediction is a fixed target. `d` starts as a normalized
/// Gaussian draw.
pub fn vat_perturbation<R: Rng + ?Sized>(
    x: &Tensor,
    model: &Classifier,
    spec: &PerturbationSpec,
    rng: &mut R,
) -> Result<Perturbation> {
    require(spec, spec.method == Method::Vat, "vat_perturbation")?;
    let clean = model.predict_proba(x)?;
    let mut forwards = 1;
    let mut backwards = 0;
    let d0 = Tensor::from_fn(x.shape(), |_| rng.sample::<f64, _>(StandardNormal))?;
    let (d, degenerate) = power_iteration(d0, spec.power_iterations, spec.xi, |r| {
        let tape = Tape::new();
        let rv = tape.param(r.clone());
        let bound = model.bind(&tape, false);
        let q = bound.probabilities(tape.constant(x.clone()).add(rv)?)?;
        kl_divergence(tape.constant(clean.clone()), q)?.backward()?;
        forwards += bound.forwards();
        backwards += 1;
        Ok(rv.grad().unwrap_or_else(|| r.map(|_| 0.0)))
    })?;
    Ok(Perturbation {
        r: d.scaled(spec.epsilon),
        degenerate,
        forwards,
        backwards,
    })
}

/// `x ⊙ (ε·z)`; only `z` carries gradient.
pub fn make_masked_input<'t>(x: &Tensor, z: Var<'t>, epsilon: f64) -> Result<Var<'t>> {
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(Error::Contract(format!("epsilon must be positive, got {epsilon}")));
    }
    x.expect_same_shape(&z.value(), "make_masked_input")?;
    let xv = z.tape().constant(x.clone());
    let z = if epsilon == 1.0 { z } else { z.scale(epsilon)? };
    xv.mul(z)
}

/// What the perturbed prediction is compared against.
#[derive(Clone, Copy, Debug)]
pub enum Target<'a, 't> {
    /// One-hot labels, compared with cross-entropy.
    Labels(&'a Tensor),
    /// Clean-input probabilities, compared with KL. Detached before use.
    Clean(Var<'t>),
}

/// Divergence between a target and the prediction on `x_pert`.
pub fn consistency_against<'t>(
    target: Target<'_, 't>,
    x_pert: Var<'t>,
    model: &BoundClassifier<'t>,
) -> Result<Var<'t>> {
    let q = model.probabilities(x_pert)?;
    match target {
        Target::Labels(h) => cross_entropy(h, q),
        Target::Clean(p) => kl_divergence(p.detach(), q),
    }
}

/// `D[p(y|x), p(y|x_pert)]` (KL, detached clean side) or
/// `D[h(y|x), p(y|x_pert)]` (cross-entropy against labels).
pub fn consistency_loss<'t>(
    x: &Tensor,
    x_pert: Var<'t>,
    model: &BoundClassifier<'t>,
    divergence: Divergence,
    y_onehot: Option<&Tensor>,
) -> Result<Var<'t>> {
    match divergence {
        Divergence::CrossEntropy => {
            let h = y_onehot
                .ok_or_else(|| Error::Contract("cross-entropy consistency needs labels".into()))?;
            consistency_against(Target::Labels(h), x_pert, model)
        }
        Divergence::Kl => {
            let clean = model.probabilities(x_pert.tape().constant(x.clone()))?;
            consistency_against(Target::Clean(clean), x_pert, model)
        }
    }
}

/// Per-example mean of `ΔD(z, x, θ) + λ·Σⱼ σ(log αⱼ − β·log(−γ/ζ))` with
/// `z = g(f(log α, u))` and the masked input `x ⊙ εz`.
///
/// Differentiable in both `log_alpha` and the classifier parameters.
pub fn xadv_objective<'t>(
    x: &Tensor,
    model: &BoundClassifier<'t>,
    log_alpha: Var<'t>,
    u: &Tensor,
    spec: &PerturbationSpec,
    y_onehot: Option<&Tensor>,
) -> Result<Var<'t>> {
    require(spec, spec.method.is_multiplicative(), "xadv_objective")?;
    if spec.method == Method::Xat && y_onehot.is_none() {
        return Err(Error::Contract("xAT needs labels".into()));
    }
    let z = sample_mask_var(log_alpha, u, &spec.hard_concrete)?;
    let x_pert = make_masked_input(x, z, spec.epsilon)?;
    let delta = consistency_loss(x, x_pert, model, spec.method.divergence(), y_onehot)?;
    let batch = x.rows() as f64;
    let penalty = l0_surrogate(log_alpha, &spec.hard_concrete)?.scale(spec.lambda / batch)?;
    delta.add(penalty)
}

/// Free `log α` rows, one per training example.
#[derive(Clone, Debug, PartialEq)]
pub struct TransductiveTable {
    /// `[N × P]`
    pub log_alpha: Tensor,
    pub lr: f64,
}

impl TransductiveTable {
    pub fn new(examples: usize, features: usize, lr: f64) -> Result<Self> {
        Ok(Self {
            log_alpha: Tensor::zeros(&[examples, features])?,
            lr,
        })
    }

    /// Rows drawn from a unit Gaussian.
    pub fn gaussian<R: Rng + ?Sized>(examples: usize, features: usize, lr: f64, rng: &mut R) -> Result<Self> {
        Ok(Self {
            log_alpha: Tensor::from_fn(&[examples, features], |_| rng.sample::<f64, _>(StandardNormal))?,
            lr,
        })
    }

    pub fn len(&self) -> usize {
        self.log_alpha.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn rows(&self, ids: &[usize]) -> Result<Tensor> {
        self.log_alpha.select_rows(ids)
    }

    /// Plain SGD step on the listed rows.
    pub fn apply_gradient(&mut self, ids: &[usize], grad: &Tensor) -> Result<()> {
        if grad.rows() != ids.len() || grad.row_len() != self.log_alpha.row_len() {
            return Err(Error::dim(
                "transductive_table",
                format!("gradient {:?} for {} rows", grad.shape(), ids.len()),
            ));
        }
        for (k, &id) in ids.iter().enumerate() {
            if id >= self.len() {
                return Err(Error::dim("transductive_table", format!("row {id} out of range")));
            }
            let lr = self.lr;
            for (w, g) in self.log_alpha.row_mut(id).iter_mut().zip(grad.row(k)) {
                *w -= lr * g;
            }
        }
        Ok(())
    }
}
