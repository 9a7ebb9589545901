use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

/// Learning rate as a function of the (zero-based) iteration.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Schedule {
    #[default]
    Constant,
    /// Multiply by `factor` after every `every` iterations.
    StepDecay { factor: f64, every: usize },
    /// Constant until `start`, then linear down to zero at `end`.
    LinearTail { start: usize, end: usize },
}

impl Schedule {
    pub fn multiplier(&self, iteration: usize) -> f64 {
        match *self {
            Schedule::Constant => 1.0,
            Schedule::StepDecay { factor, every } => factor.powi((iteration / every) as i32),
            Schedule::LinearTail { start, end } => {
                if iteration < start {
                    1.0
                } else if iteration >= end {
                    0.0
                } else {
                    (end - iteration) as f64 / (end - start) as f64
                }
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            Schedule::Constant => Ok(()),
            Schedule::StepDecay { factor, every } => {
                if every == 0 || !(factor > 0.0 && factor.is_finite()) {
                    return Err(Error::Config(format!(
                        "step_decay needs every >= 1 and factor > 0, got every={every}, factor={factor}"
                    )));
                }
                Ok(())
            }
            Schedule::LinearTail { start, end } => {
                if end <= start {
                    return Err(Error::Config(format!("linear_tail needs start < end, got {start}..{end}")));
                }
                Ok(())
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    #[serde(default)]
    pub schedule: Schedule,
}

impl OptimizerConfig {
    pub fn adam(lr: f64) -> Self {
        Self {
            kind: OptimizerKind::Adam,
            lr,
            schedule: Schedule::Constant,
        }
    }

    pub fn sgd(lr: f64) -> Self {
        Self {
            kind: OptimizerKind::Sgd,
            lr,
            schedule: Schedule::Constant,
        }
    }

    pub fn with_schedule(mut self, schedule: Schedule) -> Self {
        self.schedule = schedule;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be non-negative, got {}", self.lr)));
        }
        self.schedule.validate()
    }

    pub fn lr_at(&self, iteration: usize) -> f64 {
        self.lr * self.schedule.multiplier(iteration)
    }
}

/// First and second moment estimates, one pair per parameter tensor.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

fn check_pairs(params: &[&mut Tensor], grads: &[Tensor], op: &'static str) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::dim(op, format!("{} parameters, {} gradients", params.len(), grads.len())));
    }
    for (p, g) in params.iter().zip(grads) {
        p.expect_same_shape(g, op)?;
    }
    Ok(())
}

/// One bias-corrected Adam step, in place.
pub fn adam_update(params: &mut [&mut Tensor], grads: &[Tensor], state: &mut AdamState, lr: f64) -> Result<()> {
    check_pairs(params, grads, "adam_update")?;
    if state.m.is_empty() {
        state.m = grads.iter().map(|g| g.map(|_| 0.0)).collect();
        state.v = state.m.clone();
    }
    if state.m.len() != params.len() || state.m.iter().zip(grads.iter()).any(|(m, g)| m.shape() != g.shape()) {
        return Err(Error::dim("adam_update", "optimizer state does not mirror the parameters"));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - ADAM_BETA1.powi(t);
    let c2 = 1.0 - ADAM_BETA2.powi(t);
    for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        let (p, m, v) = (p.data_mut(), m.data_mut(), v.data_mut());
        for i in 0..p.len() {
            let gi = g.data()[i];
            m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * gi;
            v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * gi * gi;
            p[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + ADAM_EPS);
        }
    }
    Ok(())
}

pub fn sgd_update(params: &mut [&mut Tensor], grads: &[Tensor], lr: f64) -> Result<()> {
    check_pairs(params, grads, "sgd_update")?;
    for (p, g) in params.iter_mut().zip(grads) {
        for (w, d) in p.data_mut().iter_mut().zip(g.data()) {
            *w -= lr * d;
        }
    }
    Ok(())
}

/// An optimizer bound to one parameter set.
#[derive(Clone, Debug)]
pub struct Optimizer {
    pub config: OptimizerConfig,
    adam: AdamState,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            adam: AdamState::default(),
        })
    }

    pub fn lr_at(&self, iteration: usize) -> f64 {
        self.config.lr_at(iteration)
    }

    pub fn step(&mut self, mut params: Vec<&mut Tensor>, grads: &[Tensor], iteration: usize) -> Result<()> {
        let lr = self.lr_at(iteration);
        match self.config.kind {
            OptimizerKind::Adam => adam_update(&mut params, grads, &mut self.adam, lr),
            OptimizerKind::Sgd => sgd_update(&mut params, grads, lr),
        }
    }
}
