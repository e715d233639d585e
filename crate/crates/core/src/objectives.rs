//! Policy-learning signals: Vulnerability, Affinity, their Hardness
//! combination, and the Diversity prior on batch-mean head distributions.

use aroid_nn::loss::cross_entropy_losses;
use aroid_nn::{Network, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attacks::{pgd, AttackConfig};
use crate::augspace::{AugmentationSpace, Head, HeadKind};
use crate::error::{Error, Result};
use crate::policy::PolicyOutput;

const LOG_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HardnessConfig {
    pub lambda: f64,
    pub vul_attack: AttackConfig,
}

/// Diversity limits as factors of a head's mean probability `1/|head|`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiversityLimits {
    pub lower: f64,
    pub upper: f64,
}

impl DiversityLimits {
    pub fn new(lower: f64, upper: f64) -> Result<Self> {
        let limits = Self { lower, upper };
        limits.validate()?;
        Ok(limits)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lower > 0.0 && self.lower < 1.0 && self.upper > 1.0) {
            return Err(Error::Config(format!(
                "diversity limits need 0 < l < 1 < u, got l={} u={}",
                self.lower, self.upper
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HardnessRecord {
    pub vulnerability: f64,
    pub affinity: f64,
    pub hardness: f64,
}

impl HardnessRecord {
    pub fn new(vulnerability: f64, affinity: f64, lambda: f64) -> Self {
        Self {
            vulnerability,
            affinity,
            hardness: vulnerability - lambda * affinity,
        }
    }
}

/// `L(pgd(x̂); θ) - L(x̂; θ)` per sample. The model is only read.
pub fn vulnerability<R: Rng + ?Sized>(
    target: &Network,
    aug_batch: &Tensor,
    labels: &[usize],
    attack: &AttackConfig,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let clean = cross_entropy_losses(&target.forward(aug_batch)?, labels)?;
    let adv = pgd(target, aug_batch, labels, attack, rng)?;
    let attacked = cross_entropy_losses(&target.forward(&adv)?, labels)?;
    Ok(attacked
        .iter()
        .zip(&clean)
        .map(|(&a, &c)| a as f64 - c as f64)
        .collect())
}

/// `L(x̂; θ_aft) - L(x; θ_aft)` per sample.
pub fn affinity(affinity_model: &Network, orig_batch: &Tensor, aug_batch: &Tensor, labels: &[usize]) -> Result<Vec<f64>> {
    if orig_batch.dims() != aug_batch.dims() {
        return Err(Error::Input(format!(
            "original batch {:?} and augmented batch {:?} differ in shape",
            orig_batch.dims(),
            aug_batch.dims()
        )));
    }
    let orig = cross_entropy_losses(&affinity_model.forward(orig_batch)?, labels)?;
    let aug = cross_entropy_losses(&affinity_model.forward(aug_batch)?, labels)?;
    Ok(aug.iter().zip(&orig).map(|(&a, &o)| a as f64 - o as f64).collect())
}

/// Elementwise `vul - λ·aft`.
pub fn hardness(vul: &[f64], aft: &[f64], lambda: f64) -> Result<Vec<f64>> {
    if vul.len() != aft.len() {
        return Err(Error::Input(format!(
            "{} vulnerability values vs {} affinity values",
            vul.len(),
            aft.len()
        )));
    }
    Ok(vul.iter().zip(aft).map(|(v, a)| v - lambda * a).collect())
}

/// Diversity value of one distribution with its gradient w.r.t. that
/// distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct DiversityTerm {
    pub loss: f64,
    pub grad: Vec<f64>,
    pub violations: usize,
}

/// `(1/C)[-Σ_{q_i < l·p̃} log q_i + Σ_{q_j > u·p̃} log q_j]` with `p̃ = 1/len`;
/// zero when nothing violates. Boundary values are not violations.
pub fn diversity_flat(q: &[f64], limits: &DiversityLimits) -> DiversityTerm {
    let mean = 1.0 / q.len() as f64;
    let (lo, hi) = (limits.lower * mean, limits.upper * mean);
    let mut loss = 0.0;
    let mut grad = vec![0.0; q.len()];
    let mut count = 0usize;
    for (i, &qi) in q.iter().enumerate() {
        let clamped = qi.max(LOG_FLOOR);
        if qi < lo {
            loss -= clamped.ln();
            grad[i] = -1.0 / clamped;
            count += 1;
        } else if qi > hi {
            loss += clamped.ln();
            grad[i] = 1.0 / clamped;
            count += 1;
        }
    }
    if count == 0 {
        return DiversityTerm {
            loss: 0.0,
            grad,
            violations: 0,
        };
    }
    let c = count as f64;
    grad.iter_mut().for_each(|g| *g /= c);
    DiversityTerm {
        loss: loss / c,
        grad,
        violations: count,
    }
}

/// Two-level diversity for heads whose entries group into operation types:
/// the flat loss over type totals plus the mean flat loss over renormalised
/// magnitude distributions of every multi-magnitude type.
pub fn diversity_hierarchical(q: &[f64], head: &Head, limits: &DiversityLimits) -> DiversityTerm {
    let groups = head.op_groups();
    let totals: Vec<f64> = groups.iter().map(|(_, r)| q[r.clone()].iter().sum()).collect();
    let type_term = diversity_flat(&totals, limits);
    let mut grad = vec![0.0; q.len()];
    let mut violations = type_term.violations;
    for ((_, range), g) in groups.iter().zip(&type_term.grad) {
        for i in range.clone() {
            grad[i] += g;
        }
    }
    let multi: Vec<usize> = (0..groups.len()).filter(|&g| groups[g].1.len() > 1).collect();
    let mut strength_sum = 0.0;
    for &g in &multi {
        let range = groups[g].1.clone();
        let total = totals[g].max(LOG_FLOOR);
        let r: Vec<f64> = q[range.clone()].iter().map(|v| v / total).collect();
        let term = diversity_flat(&r, limits);
        strength_sum += term.loss;
        violations += term.violations;
        // dr_j/dq_i = (δ_ij - r_j)/Q, scaled by 1/|multi| for the mean.
        let dot: f64 = term.grad.iter().zip(&r).map(|(a, b)| a * b).sum();
        let scale = 1.0 / (multi.len() as f64 * total);
        for (k, i) in range.enumerate() {
            grad[i] += (term.grad[k] - dot) * scale;
        }
    }
    let strength = if multi.is_empty() {
        0.0
    } else {
        strength_sum / multi.len() as f64
    };
    DiversityTerm {
        loss: type_term.loss + strength,
        grad,
        violations,
    }
}

/// Diversity for one head's batch-mean distribution.
pub fn diversity_for_head(q: &[f64], head: &Head, limits: &DiversityLimits) -> DiversityTerm {
    if head.kind == HeadKind::ColorShape {
        diversity_hierarchical(q, head, limits)
    } else {
        diversity_flat(q, limits)
    }
}

/// Mean over the batch of each image's distribution on head `h`.
pub fn batch_mean(outputs: &[PolicyOutput], h: usize) -> Vec<f64> {
    let n = outputs.len() as f64;
    let mut q = vec![0.0; outputs[0].probs[h].len()];
    for o in outputs {
        for (a, b) in q.iter_mut().zip(&o.probs[h]) {
            *a += b;
        }
    }
    q.iter_mut().for_each(|v| *v /= n);
    q
}

fn check_batch(outputs: &[PolicyOutput], space: &AugmentationSpace) -> Result<()> {
    if outputs.is_empty() {
        return Err(Error::Input("diversity needs a non-empty batch".into()));
    }
    let sig = space.signature();
    if let Some(bad) = outputs.iter().position(|o| o.signature() != sig) {
        return Err(Error::Input(format!(
            "policy output {bad} has head sizes {:?}, space has {sig:?}",
            outputs[bad].signature()
        )));
    }
    Ok(())
}

/// Per-head diversity of a batch of policy outputs.
pub fn diversity(outputs: &[PolicyOutput], limits: &DiversityLimits, space: &AugmentationSpace) -> Result<Vec<f64>> {
    check_batch(outputs, space)?;
    Ok(space
        .heads()
        .iter()
        .enumerate()
        .map(|(h, head)| diversity_for_head(&batch_mean(outputs, h), head, limits).loss)
        .collect())
}

/// Per-head diversity plus the gradient of their sum w.r.t. every image's
/// logits, `[image][head][index]`.
pub fn diversity_with_logit_grad(
    outputs: &[PolicyOutput],
    limits: &DiversityLimits,
    space: &AugmentationSpace,
) -> Result<(Vec<f64>, Vec<Vec<Vec<f64>>>)> {
    check_batch(outputs, space)?;
    let n = outputs.len() as f64;
    let mut losses = Vec::with_capacity(space.heads().len());
    let mut dlogits: Vec<Vec<Vec<f64>>> = outputs
        .iter()
        .map(|o| o.probs.iter().map(|p| vec![0.0; p.len()]).collect())
        .collect();
    for (h, head) in space.heads().iter().enumerate() {
        let term = diversity_for_head(&batch_mean(outputs, h), head, limits);
        losses.push(term.loss);
        if term.violations == 0 {
            continue;
        }
        for (o, d) in outputs.iter().zip(dlogits.iter_mut()) {
            let p = &o.probs[h];
            // Softmax Jacobian-vector product with dq/dp = 1/N.
            let dot: f64 = p.iter().zip(&term.grad).map(|(a, b)| a * b).sum();
            for (k, slot) in d[h].iter_mut().enumerate() {
                *slot = p[k] * (term.grad[k] - dot) / n;
            }
        }
    }
    Ok((losses, dlogits))
}
