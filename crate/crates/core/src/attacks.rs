//! ℓ∞ projected gradient descent on the cross-entropy loss.

use aroid_nn::loss::cross_entropy;
use aroid_nn::{BackwardMode, Network, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackConfig {
    /// ℓ∞ budget in `[0, 1]` pixel units.
    pub epsilon: f32,
    pub step_size: f32,
    pub steps: usize,
    pub random_start: bool,
}

impl AttackConfig {
    /// PGD10 with ε = 8/255 and step 2/255, random start.
    pub fn pgd10() -> Self {
        Self {
            epsilon: 8.0 / 255.0,
            step_size: 2.0 / 255.0,
            steps: 10,
            random_start: true,
        }
    }

    /// PGD2 with ε = 8/255 and step 2/255, deterministic start.
    pub fn pgd2() -> Self {
        Self {
            epsilon: 8.0 / 255.0,
            step_size: 2.0 / 255.0,
            steps: 2,
            random_start: false,
        }
    }

    pub fn none() -> Self {
        Self {
            epsilon: 0.0,
            step_size: 0.0,
            steps: 0,
            random_start: false,
        }
    }

    pub fn with_epsilon(mut self, epsilon: f32) -> Self {
        self.epsilon = epsilon;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0) {
            return Err(Error::Config(format!("attack epsilon must be >= 0, got {}", self.epsilon)));
        }
        if self.steps > 0 && !(self.step_size > 0.0) {
            return Err(Error::Config(format!(
                "attack step size must be > 0 when steps > 0, got {}",
                self.step_size
            )));
        }
        Ok(())
    }
}

fn sign(v: f32) -> f32 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Per-sample losses and the input gradient of their sum.
pub fn loss_and_input_grad(model: &Network, x: &Tensor, labels: &[usize]) -> Result<(Vec<f32>, Tensor)> {
    let (logits, tape) = model.forward_tape(x)?;
    let (losses, dlogits) = cross_entropy(&logits, labels)?;
    let (_, dx) = model.backward(&tape, dlogits, BackwardMode::INPUT)?;
    Ok((losses, dx.expect("input gradient requested")))
}

/// Generates adversarial examples; see [`pgd_observed`].
pub fn pgd<R: Rng + ?Sized>(
    model: &Network,
    x: &Tensor,
    labels: &[usize],
    cfg: &AttackConfig,
    rng: &mut R,
) -> Result<Tensor> {
    pgd_observed(model, x, labels, cfg, rng, |_, _| {})
}

/// Sign-gradient ascent on the cross-entropy with projection onto the ε-ball
/// around `x` and onto `[0, 1]` after every step. `observe(step, adv)` is
/// called after the start point (step 0) and after every projected step.
pub fn pgd_observed<R, F>(
    model: &Network,
    x: &Tensor,
    labels: &[usize],
    cfg: &AttackConfig,
    rng: &mut R,
    mut observe: F,
) -> Result<Tensor>
where
    R: Rng + ?Sized,
    F: FnMut(usize, &Tensor),
{
    cfg.validate()?;
    let eps = cfg.epsilon;
    let mut adv = x.clone();
    if cfg.random_start && eps > 0.0 {
        for (a, &o) in adv.data_mut().iter_mut().zip(x.data()) {
            *a = (o + rng.random_range(-eps..=eps)).clamp(0.0, 1.0);
        }
    }
    observe(0, &adv);
    if eps == 0.0 {
        return Ok(adv);
    }
    for step in 1..=cfg.steps {
        let (losses, grad) = loss_and_input_grad(model, &adv, labels)?;
        if let Some((i, l)) = losses.iter().enumerate().find(|(_, l)| !l.is_finite()) {
            return Err(Error::Attack(format!(
                "non-finite loss {l} for sample {i} (label {}) at step {step} of {}",
                labels[i], cfg.steps
            )));
        }
        for ((a, &o), &g) in adv.data_mut().iter_mut().zip(x.data()).zip(grad.data()) {
            let moved = *a + cfg.step_size * sign(g);
            *a = moved.clamp(o - eps, o + eps).clamp(0.0, 1.0);
        }
        observe(step, &adv);
    }
    Ok(adv)
}
