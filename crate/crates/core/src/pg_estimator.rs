//! Score-function (REINFORCE) estimate of the policy gradient and the policy
//! update step built on it.

use aroid_nn::optim::Sgd;
use aroid_nn::Network;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attacks::AttackConfig;
use crate::augspace::{apply_trajectory, AugmentationSpace, TrajectoryCode};
use crate::error::{Error, Result};
use crate::image::{batch_tensor, Image};
use crate::objectives::{affinity, diversity_with_logit_grad, vulnerability, DiversityLimits, HardnessRecord};
use crate::policy::{log_prob_grad, sample_trajectories, PolicyModel, PolicyOutput};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Baseline {
    /// Subtract the mean hardness over the image's own trajectories.
    PerSampleMean,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PgConfig {
    pub trajectories: usize,
    pub beta: f64,
    pub limits: DiversityLimits,
    pub baseline: Baseline,
    pub clip_norm: f32,
}

impl PgConfig {
    pub fn validate(&self) -> Result<()> {
        if self.trajectories == 0 {
            return Err(Error::Config("trajectories per image must be at least 1".into()));
        }
        if self.baseline == Baseline::PerSampleMean && self.trajectories < 2 {
            return Err(Error::Config(
                "the per-sample mean baseline needs at least 2 trajectories per image".into(),
            ));
        }
        if !(self.beta >= 0.0) {
            return Err(Error::Config(format!("beta must be >= 0, got {}", self.beta)));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::Config(format!("clip norm must be > 0, got {}", self.clip_norm)));
        }
        self.limits.validate()
    }
}

/// Surrogate value `(1/NT) Σ_n Σ_t log P_{n,t} · (h_{n,t} - b_n)` and the
/// coefficient multiplying each `∇ log P_{n,t}` in its gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Surrogate {
    pub value: f64,
    pub coefficients: Vec<Vec<f64>>,
}

/// `log_probs` and `hardness` are indexed `[image][trajectory]`.
pub fn surrogate(log_probs: &[Vec<f64>], hardness: &[Vec<f64>], baseline: Baseline) -> Result<Surrogate> {
    if log_probs.is_empty() || log_probs.len() != hardness.len() {
        return Err(Error::Input(format!(
            "{} log-prob rows vs {} hardness rows",
            log_probs.len(),
            hardness.len()
        )));
    }
    let n = log_probs.len() as f64;
    let mut value = 0.0;
    let mut coefficients = Vec::with_capacity(log_probs.len());
    for (i, (lp, h)) in log_probs.iter().zip(hardness).enumerate() {
        let t = h.len();
        if t == 0 || lp.len() != t {
            return Err(Error::Input(format!(
                "image {i}: {} log-probs vs {t} hardness values",
                lp.len()
            )));
        }
        if baseline == Baseline::PerSampleMean && t < 2 {
            return Err(Error::Input(format!(
                "image {i}: the per-sample mean baseline needs at least 2 trajectories, got {t}"
            )));
        }
        let b = match baseline {
            Baseline::PerSampleMean => h.iter().sum::<f64>() / t as f64,
            Baseline::None => 0.0,
        };
        let scale = 1.0 / (n * t as f64);
        let row: Vec<f64> = h.iter().map(|v| (v - b) * scale).collect();
        value += lp.iter().zip(&row).map(|(a, c)| a * c).sum::<f64>();
        coefficients.push(row);
    }
    Ok(Surrogate { value, coefficients })
}

/// Gradient of the surrogate w.r.t. every image's logits, `[image][head][index]`.
pub fn surrogate_logit_grad(
    outputs: &[PolicyOutput],
    codes: &[Vec<TrajectoryCode>],
    coefficients: &[Vec<f64>],
) -> Result<Vec<Vec<Vec<f64>>>> {
    outputs
        .iter()
        .zip(codes)
        .zip(coefficients)
        .map(|((out, cs), coeff)| {
            let mut acc: Vec<Vec<f64>> = out.probs.iter().map(|p| vec![0.0; p.len()]).collect();
            for (code, &c) in cs.iter().zip(coeff) {
                for (a, g) in acc.iter_mut().zip(log_prob_grad(out, code)?) {
                    for (x, y) in a.iter_mut().zip(g) {
                        *x += c * y;
                    }
                }
            }
            Ok(acc)
        })
        .collect()
}

/// Produces hardness for `(image, code)` pairs without touching any model.
pub trait HardnessSource {
    fn evaluate(&mut self, images: &[&Image], labels: &[usize], codes: &[TrajectoryCode]) -> Result<Vec<HardnessRecord>>;
}

/// Hardness from the live target model and the frozen affinity model.
pub struct AdversarialHardness<'a, R: Rng> {
    pub target: &'a Network,
    pub affinity_model: &'a Network,
    pub space: &'a AugmentationSpace,
    pub attack: AttackConfig,
    pub lambda: f64,
    pub aug_rng: &'a mut R,
    pub attack_rng: &'a mut R,
}

impl<R: Rng> HardnessSource for AdversarialHardness<'_, R> {
    fn evaluate(&mut self, images: &[&Image], labels: &[usize], codes: &[TrajectoryCode]) -> Result<Vec<HardnessRecord>> {
        if images.len() != codes.len() || images.len() != labels.len() {
            return Err(Error::Input(format!(
                "{} images, {} labels, {} codes",
                images.len(),
                labels.len(),
                codes.len()
            )));
        }
        let augmented: Vec<Image> = images
            .iter()
            .zip(codes)
            .map(|(img, code)| apply_trajectory(img, code, self.space, &mut *self.aug_rng))
            .collect::<Result<_>>()?;
        let orig = batch_tensor(images.iter().copied())?;
        let aug = batch_tensor(&augmented)?;
        let vul = vulnerability(self.target, &aug, labels, &self.attack, &mut *self.attack_rng)?;
        let aft = affinity(self.affinity_model, &orig, &aug, labels)?;
        Ok(vul
            .into_iter()
            .zip(aft)
            .map(|(v, a)| HardnessRecord::new(v, a, self.lambda))
            .collect())
    }
}

/// Hardness given by a function of the code alone, with zero affinity.
pub struct CodeHardness<F>(pub F);

impl<F: FnMut(&TrajectoryCode) -> f64> HardnessSource for CodeHardness<F> {
    fn evaluate(&mut self, _images: &[&Image], _labels: &[usize], codes: &[TrajectoryCode]) -> Result<Vec<HardnessRecord>> {
        Ok(codes.iter().map(|c| HardnessRecord::new((self.0)(c), 0.0, 0.0)).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyLossBreakdown {
    pub surrogate: f64,
    /// Unweighted mean of the per-head diversity terms.
    pub diversity: f64,
    pub diversity_per_head: Vec<f64>,
    /// `-surrogate + β·diversity`, the minimised quantity.
    pub total: f64,
    pub mean_hardness: f64,
    pub mean_vulnerability: f64,
    pub mean_affinity: f64,
    pub grad_norm: f32,
    /// Set when a non-finite value blocked the parameter update.
    pub skipped: bool,
}

/// One policy update: sample `T` trajectories per image, score them, and take
/// an SGD step on `-surrogate + β·mean_h diversity_h` with clipped gradients.
/// Non-finite hardness, loss or gradients skip the step and leave the policy
/// unchanged.
pub fn policy_update_step<R: Rng + ?Sized>(
    policy: &mut PolicyModel,
    optimizer: &mut Sgd,
    space: &AugmentationSpace,
    images: &[&Image],
    labels: &[usize],
    source: &mut dyn HardnessSource,
    cfg: &PgConfig,
    sampling_rng: &mut R,
) -> Result<PolicyLossBreakdown> {
    cfg.validate()?;
    if images.is_empty() || images.len() != labels.len() {
        return Err(Error::Input(format!("{} images vs {} labels", images.len(), labels.len())));
    }
    let t = cfg.trajectories;
    let (outputs, tape) = policy.forward_tape(images)?;
    let mut codes = Vec::with_capacity(images.len());
    let mut log_probs = Vec::with_capacity(images.len());
    for out in &outputs {
        let trajs = sample_trajectories(out, t, sampling_rng)?;
        log_probs.push(trajs.iter().map(|tr| tr.log_prob).collect::<Vec<_>>());
        codes.push(trajs.into_iter().map(|tr| tr.code).collect::<Vec<_>>());
    }
    let rep_images: Vec<&Image> = images.iter().flat_map(|&img| std::iter::repeat_n(img, t)).collect();
    let rep_labels: Vec<usize> = labels.iter().flat_map(|&l| std::iter::repeat_n(l, t)).collect();
    let flat_codes: Vec<TrajectoryCode> = codes.iter().flatten().cloned().collect();
    let records = source.evaluate(&rep_images, &rep_labels, &flat_codes)?;
    if records.len() != flat_codes.len() {
        return Err(Error::Policy(format!(
            "hardness source returned {} records for {} trajectories",
            records.len(),
            flat_codes.len()
        )));
    }
    let hardness: Vec<Vec<f64>> = records.chunks(t).map(|c| c.iter().map(|r| r.hardness).collect()).collect();
    let count = records.len() as f64;
    let mean_of = |f: fn(&HardnessRecord) -> f64| records.iter().map(f).sum::<f64>() / count;
    let mean_hardness = mean_of(|r| r.hardness);
    let mean_vulnerability = mean_of(|r| r.vulnerability);
    let mean_affinity = mean_of(|r| r.affinity);

    let mut breakdown = PolicyLossBreakdown {
        surrogate: f64::NAN,
        diversity: f64::NAN,
        diversity_per_head: Vec::new(),
        total: f64::NAN,
        mean_hardness,
        mean_vulnerability,
        mean_affinity,
        grad_norm: f32::NAN,
        skipped: true,
    };
    if !mean_hardness.is_finite() {
        return Ok(breakdown);
    }
    let sur = surrogate(&log_probs, &hardness, cfg.baseline)?;
    let (div_heads, div_grad) = diversity_with_logit_grad(&outputs, &cfg.limits, space)?;
    let heads = div_heads.len() as f64;
    let diversity = div_heads.iter().sum::<f64>() / heads;
    breakdown.surrogate = sur.value;
    breakdown.diversity = diversity;
    breakdown.diversity_per_head = div_heads;
    breakdown.total = -sur.value + cfg.beta * diversity;
    if !breakdown.total.is_finite() {
        return Ok(breakdown);
    }

    let sur_grad = surrogate_logit_grad(&outputs, &codes, &sur.coefficients)?;
    let w = cfg.beta / heads;
    let dlogits: Vec<Vec<Vec<f64>>> = sur_grad
        .into_iter()
        .zip(div_grad)
        .map(|(s, d)| {
            s.into_iter()
                .zip(d)
                .map(|(sh, dh)| sh.iter().zip(&dh).map(|(a, b)| -a + w * b).collect())
                .collect()
        })
        .collect();
    let mut grads = policy.backward(&tape, &dlogits)?;
    if !grads.is_finite() {
        return Ok(breakdown);
    }
    breakdown.grad_norm = grads.clip_global_norm(cfg.clip_norm);
    optimizer.step_params(policy.params_mut(), &grads);
    breakdown.skipped = false;
    Ok(breakdown)
}
