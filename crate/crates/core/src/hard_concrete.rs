//! The hard concrete distribution over gates in `[0, 1]`.
//!
//! A sample stretches a binary-concrete draw to `(γ, ζ)` and clips it back
//! to `[0, 1]`, which puts point masses on exactly 0 and exactly 1 while
//! keeping the sample differentiable in `log α`:
//!
//! ```text
//! s = σ((log u − log(1−u) + log α) / β) · (ζ − γ) + γ,   u ~ U(0, 1)
//! z = min(1, max(0, s))
//! ```
//!
//! `P(z > 0) = σ(log α − β·log(−γ/ζ))`, which is the differentiable stand-in
//! for the L0 count of active gates.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{sigmoid, Var};
use crate::tensor::Tensor;

/// Uniform draws are kept this far from 0 and 1.
pub const UNIFORM_MARGIN: f64 = 1e-7;

/// Shaping constants `(β, γ, ζ)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HardConcrete {
    /// Temperature.
    pub beta: f64,
    /// Lower stretch limit, below 0.
    pub gamma: f64,
    /// Upper stretch limit, above 1.
    pub zeta: f64,
}

impl Default for HardConcrete {
    fn default() -> Self {
        Self {
            beta: 2.0 / 3.0,
            gamma: -0.1,
            zeta: 1.1,
        }
    }
}

impl HardConcrete {
    pub fn new(beta: f64, gamma: f64, zeta: f64) -> Result<Self> {
        let hc = Self { beta, gamma, zeta };
        hc.validate()?;
        Ok(hc)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::Contract(format!("beta must be positive, got {}", self.beta)));
        }
        if !(self.gamma < 0.0 && self.zeta > 1.0 && self.gamma.is_finite() && self.zeta.is_finite()) {
            return Err(Error::Contract(format!(
                "need gamma < 0 < 1 < zeta, got gamma={} zeta={}",
                self.gamma, self.zeta
            )));
        }
        Ok(())
    }

    /// `β·log(−γ/ζ)`, the log α at which a gate is active half the time.
    pub fn activity_shift(&self) -> f64 {
        self.beta * (-self.gamma / self.zeta).ln()
    }

    /// Pre-clip sample `f(log α, u)`, in `[γ, ζ]`.
    pub fn stretched(&self, log_alpha: f64, u: f64) -> f64 {
        let u = u.clamp(UNIFORM_MARGIN, 1.0 - UNIFORM_MARGIN);
        let noise = u.ln() - (1.0 - u).ln();
        sigmoid((noise + log_alpha) / self.beta) * (self.zeta - self.gamma) + self.gamma
    }

    pub fn gate(&self, log_alpha: f64, u: f64) -> f64 {
        self.stretched(log_alpha, u).clamp(0.0, 1.0)
    }

    /// `P(z > 0)` for one gate.
    pub fn active_probability(&self, log_alpha: f64) -> f64 {
        sigmoid(log_alpha - self.activity_shift())
    }

    /// Deterministic gate at the noise median `u = 0.5`.
    pub fn median_gate(&self, log_alpha: f64) -> f64 {
        (sigmoid(log_alpha / self.beta) * (self.zeta - self.gamma) + self.gamma).clamp(0.0, 1.0)
    }
}

/// Gate locations `log α` with their shaping constants.
#[derive(Clone, Debug, PartialEq)]
pub struct HardConcreteParams {
    pub log_alpha: Tensor,
    pub dist: HardConcrete,
}

impl HardConcreteParams {
    pub fn new(log_alpha: Tensor, dist: HardConcrete) -> Result<Self> {
        dist.validate()?;
        Ok(Self { log_alpha, dist })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaskSample {
    /// Gates in `[0, 1]`.
    pub z: Tensor,
    /// The uniform draws that produced `z`, after clamping.
    pub u: Tensor,
}

fn clamp_uniform(u: &Tensor) -> Result<Tensor> {
    if let Some(v) = u.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::domain("sample_mask", format!("uniform draw {v} outside [0, 1]")));
    }
    Ok(u.map(|v| v.clamp(UNIFORM_MARGIN, 1.0 - UNIFORM_MARGIN)))
}

/// Draws `u ~ U(0, 1)` of the given shape.
pub fn draw_uniform<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Result<Tensor> {
    Tensor::from_fn(shape, |_| rng.gen::<f64>())
}

/// `z = g(f(log α, u))` without gradient tracking.
pub fn sample_mask(params: &HardConcreteParams, u: &Tensor) -> Result<MaskSample> {
    params.log_alpha.expect_same_shape(u, "sample_mask")?;
    let u = clamp_uniform(u)?;
    let z = params
        .log_alpha
        .zip_map(&u, |la, u| params.dist.gate(la, u))?;
    Ok(MaskSample { z, u })
}

/// Differentiable `z = g(f(log α, u))`; gradients reach `log_alpha` through
/// the sigmoid and the clip (zero where the clip saturates).
pub fn sample_mask_var<'t>(log_alpha: Var<'t>, u: &Tensor, dist: &HardConcrete) -> Result<Var<'t>> {
    dist.validate()?;
    log_alpha.value().expect_same_shape(u, "sample_mask")?;
    let noise = clamp_uniform(u)?.map(|u| u.ln() - (1.0 - u).ln());
    let noise = log_alpha.tape().constant(noise);
    log_alpha
        .add(noise)?
        .scale(1.0 / dist.beta)?
        .sigmoid()?
        .scale(dist.zeta - dist.gamma)?
        .offset(dist.gamma)?
        .clamp(0.0, 1.0)
}

/// `Σⱼ σ(log αⱼ − β·log(−γ/ζ))`, the expected number of nonzero gates.
pub fn l0_surrogate<'t>(log_alpha: Var<'t>, dist: &HardConcrete) -> Result<Var<'t>> {
    dist.validate()?;
    log_alpha.offset(-dist.activity_shift())?.sigmoid()?.sum()
}

/// Per-gate `P(z > 0)`.
pub fn active_probabilities(params: &HardConcreteParams) -> Tensor {
    params.log_alpha.map(|la| params.dist.active_probability(la))
}

/// Test-time mask: the gate at the noise median `u = 0.5`.
pub fn eval_mask(params: &HardConcreteParams) -> Tensor {
    params.log_alpha.map(|la| params.dist.median_gate(la))
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::tape::Tape;

    fn params(values: &[f64]) -> HardConcreteParams {
        HardConcreteParams::new(
            Tensor::new(vec![values.len()], values.to_vec()).unwrap(),
            HardConcrete::default(),
        )
        .unwrap()
    }

    /// Straight transcription of the sampling formula, one scalar at a time.
    fn reference_gate(log_alpha: f64, u: f64) -> f64 {
        let (beta, gamma, zeta) = (2.0 / 3.0, -0.1, 1.1);
        let t = ((u.ln() - (1.0 - u).ln()) + log_alpha) / beta;
        let s = 1.0 / (1.0 + (-t).exp()) * (zeta - gamma) + gamma;
        s.clamp(0.0, 1.0)
    }

    #[test]
    fn median_noise_at_zero_log_alpha() {
        let s = sample_mask(&params(&[0.0]), &Tensor::new(vec![1], vec![0.5]).unwrap()).unwrap();
        assert!((s.z.data()[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn very_negative_log_alpha_closes_gate() {
        for u in [0.011, 0.3, 0.7, 0.989] {
            let s = sample_mask(&params(&[-100.0]), &Tensor::new(vec![1], vec![u]).unwrap()).unwrap();
            assert_eq!(s.z.data()[0], 0.0);
        }
    }

    #[test]
    fn matches_scalar_reference() {
        let got = HardConcrete::default().gate(2.0, 0.9);
        let want = reference_gate(2.0, 0.9);
        assert!((got - want).abs() < 1e-15, "{got} vs {want}");
        assert!(want > 0.0 && want <= 1.0);
    }

    #[test]
    fn rejects_uniform_outside_unit_interval() {
        let err = sample_mask(&params(&[0.0]), &Tensor::new(vec![1], vec![1.5]).unwrap());
        assert!(matches!(err, Err(Error::Domain { .. })));
    }

    #[test]
    fn rejects_bad_shaping_constants() {
        assert!(HardConcrete::new(2.0 / 3.0, 0.1, 1.1).is_err());
        assert!(HardConcrete::new(0.0, -0.1, 1.1).is_err());
        assert!(HardConcrete::new(2.0 / 3.0, -0.1, 0.9).is_err());
    }

    #[test]
    fn l0_surrogate_values() {
        let hc = HardConcrete::default();
        let tape = Tape::new();
        let la = tape.param(Tensor::full(&[4], hc.activity_shift()).unwrap());
        assert!((l0_surrogate(la, &hc).unwrap().item().unwrap() - 2.0).abs() < 1e-15);

        let la = tape.param(Tensor::zeros(&[3]).unwrap());
        let per = 1.0 / (1.0 + ((2.0 / 3.0) * (0.1f64 / 1.1).ln()).exp());
        let v = l0_surrogate(la, &hc).unwrap().item().unwrap();
        assert!((v - 3.0 * per).abs() < 1e-14);

        let la = tape.param(Tensor::full(&[3], -1e3).unwrap());
        assert!(l0_surrogate(la, &hc).unwrap().item().unwrap() < 1e-300);
    }

    #[test]
    fn eval_mask_cases() {
        let m = eval_mask(&params(&[0.0, 100.0, -100.0]));
        assert!((m.data()[0] - 0.5).abs() < 1e-15);
        assert_eq!(&m.data()[1..], &[1.0, 0.0]);
    }

    #[test]
    fn differentiable_sample_agrees_with_plain() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let la = Tensor::from_fn(&[10], |i| i as f64 * 0.5 - 2.5).unwrap();
        let u = draw_uniform(&[10], &mut rng).unwrap();
        let plain = sample_mask(&HardConcreteParams::new(la.clone(), HardConcrete::default()).unwrap(), &u)
            .unwrap();
        let tape = Tape::new();
        let z = sample_mask_var(tape.param(la), &u, &HardConcrete::default()).unwrap();
        for (a, b) in z.value().data().iter().zip(plain.z.data()) {
            assert!((a - b).abs() < 1e-15);
        }
    }
}
