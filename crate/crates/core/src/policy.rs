//! Multi-head augmentation policy: a convolutional backbone whose feature
//! vector feeds one linear head per augmentation group. Each head yields a
//! categorical distribution over that group's sub-policies.

use aroid_nn::{BackwardMode, ConvNetSpec, Gradients, Layer, Linear, Network, Readout, Tape, Tensor};
use rand::Rng;

use crate::augspace::{AugmentationSpace, TrajectoryCode};
use crate::error::{Error, Result};
use crate::image::{batch_tensor, Image};

/// Per-head logits and their softmax for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyOutput {
    pub logits: Vec<Vec<f64>>,
    pub probs: Vec<Vec<f64>>,
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

impl PolicyOutput {
    pub fn from_logits(logits: Vec<Vec<f64>>) -> Self {
        let probs = logits.iter().map(|l| softmax(l)).collect();
        Self { logits, probs }
    }

    pub fn num_heads(&self) -> usize {
        self.logits.len()
    }

    pub fn signature(&self) -> Vec<usize> {
        self.logits.iter().map(Vec::len).collect()
    }
}

/// One sampled sub-policy per head with its joint log-probability and, once
/// evaluated, the realised hardness.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub code: TrajectoryCode,
    pub log_prob: f64,
    pub hardness: Option<f64>,
}

fn check_code(out: &PolicyOutput, code: &TrajectoryCode) -> Result<()> {
    if code.0.len() != out.num_heads() {
        return Err(Error::Policy(format!(
            "code has {} indices for {} heads",
            code.0.len(),
            out.num_heads()
        )));
    }
    for (h, (&i, p)) in code.0.iter().zip(&out.probs).enumerate() {
        if i >= p.len() {
            return Err(Error::Policy(format!("index {i} out of range for head {h}")));
        }
    }
    Ok(())
}

/// `sum_h log p_h[code_h]`. A selected zero probability is an error.
pub fn log_prob_of(out: &PolicyOutput, code: &TrajectoryCode) -> Result<f64> {
    check_code(out, code)?;
    let mut total = 0.0;
    for (h, (&i, p)) in code.0.iter().zip(&out.probs).enumerate() {
        if p[i] <= 0.0 {
            return Err(Error::Policy(format!(
                "selected index {i} on head {h} has zero probability (log-prob is -inf)"
            )));
        }
        total += p[i].ln();
    }
    Ok(total)
}

/// Gradient of [`log_prob_of`] w.r.t. each head's logits: `onehot(code_h) - p_h`.
pub fn log_prob_grad(out: &PolicyOutput, code: &TrajectoryCode) -> Result<Vec<Vec<f64>>> {
    check_code(out, code)?;
    Ok(out
        .probs
        .iter()
        .zip(&code.0)
        .map(|(p, &i)| {
            let mut g: Vec<f64> = p.iter().map(|v| -v).collect();
            g[i] += 1.0;
            g
        })
        .collect())
}

/// Inverse-CDF draw from a probability vector.
pub fn sample_index<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut cum = 0.0;
    let mut last_positive = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            last_positive = i;
        }
        cum += p;
        if u < cum && p > 0.0 {
            return i;
        }
    }
    last_positive
}

/// Draws `count` independent trajectories from one image's distributions.
pub fn sample_trajectories<R: Rng + ?Sized>(
    out: &PolicyOutput,
    count: usize,
    rng: &mut R,
) -> Result<Vec<Trajectory>> {
    if count == 0 {
        return Err(Error::Policy("trajectory count must be at least 1".into()));
    }
    (0..count)
        .map(|_| {
            let code = TrajectoryCode(out.probs.iter().map(|p| sample_index(p, rng)).collect());
            let log_prob = log_prob_of(out, &code)?;
            Ok(Trajectory {
                code,
                log_prob,
                hardness: None,
            })
        })
        .collect()
}

/// Recorded policy forward pass.
#[derive(Debug)]
pub struct PolicyTape {
    backbone: Tape,
    features: Tensor,
    heads: Vec<Tape>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyModel {
    backbone: Network,
    feature_len: usize,
    heads: Vec<Network>,
}

/// Default desk-scale backbone: four conv blocks and global average pooling.
pub fn default_backbone_spec(in_channels: usize, height: usize, width: usize, widths: &[usize]) -> ConvNetSpec {
    ConvNetSpec {
        in_channels,
        height,
        width,
        widths: widths.to_vec(),
        readout: Readout::GlobalAvgPool,
        outputs: None,
    }
}

impl PolicyModel {
    /// Builds a conv backbone from `spec` plus zero-initialised heads, so a fresh
    /// policy is exactly uniform on every head.
    pub fn new<R: Rng + ?Sized>(spec: &ConvNetSpec, space: &AugmentationSpace, rng: &mut R) -> Self {
        let backbone = Network::build(spec, rng);
        Self::with_backbone(backbone, spec.feature_len(), &space.signature())
    }

    /// Any network whose output is `[N, feature_len]` can serve as backbone.
    pub fn with_backbone(backbone: Network, feature_len: usize, head_sizes: &[usize]) -> Self {
        let heads = head_sizes
            .iter()
            .map(|&n| Network::from_layers(vec![Layer::Linear(Linear::zeros(feature_len, n))]))
            .collect();
        Self {
            backbone,
            feature_len,
            heads,
        }
    }

    pub fn signature(&self) -> Vec<usize> {
        self.heads
            .iter()
            .map(|h| match &h.layers()[0] {
                Layer::Linear(l) => l.out_features,
                _ => 0,
            })
            .collect()
    }

    pub fn num_heads(&self) -> usize {
        self.heads.len()
    }

    fn features(&self, x: &Tensor, record: bool) -> Result<(Tensor, Option<Tape>)> {
        let (f, tape) = if record {
            let (f, t) = self.backbone.forward_tape(x)?;
            (f, Some(t))
        } else {
            (self.backbone.forward(x)?, None)
        };
        if f.dims() != [x.batch(), self.feature_len] {
            return Err(Error::Input(format!(
                "backbone produced {:?}, heads expect [N, {}]",
                f.dims(),
                self.feature_len
            )));
        }
        Ok((f, tape))
    }

    fn outputs(logits: &[Tensor], n: usize) -> Vec<PolicyOutput> {
        (0..n)
            .map(|i| {
                PolicyOutput::from_logits(
                    logits
                        .iter()
                        .map(|t| t.item(i).iter().map(|&v| v as f64).collect())
                        .collect(),
                )
            })
            .collect()
    }

    pub fn forward(&self, batch: &[&Image]) -> Result<Vec<PolicyOutput>> {
        let x = batch_tensor(batch.iter().copied())?;
        let (f, _) = self.features(&x, false)?;
        let logits: Vec<Tensor> = self.heads.iter().map(|h| h.forward(&f)).collect::<Result<_, _>>()?;
        Ok(Self::outputs(&logits, x.batch()))
    }

    pub fn forward_tape(&self, batch: &[&Image]) -> Result<(Vec<PolicyOutput>, PolicyTape)> {
        let x = batch_tensor(batch.iter().copied())?;
        let (f, backbone) = self.features(&x, true)?;
        let mut logits = Vec::with_capacity(self.heads.len());
        let mut heads = Vec::with_capacity(self.heads.len());
        for h in &self.heads {
            let (l, t) = h.forward_tape(&f)?;
            logits.push(l);
            heads.push(t);
        }
        let outs = Self::outputs(&logits, x.batch());
        Ok((
            outs,
            PolicyTape {
                backbone: backbone.expect("recorded"),
                features: f,
                heads,
            },
        ))
    }

    /// Parameter gradients of a scalar whose gradient w.r.t. the logits is
    /// `dlogits[image][head][index]`.
    pub fn backward(&self, tape: &PolicyTape, dlogits: &[Vec<Vec<f64>>]) -> Result<Gradients> {
        let n = tape.features.batch();
        if dlogits.len() != n {
            return Err(Error::Policy(format!("{} logit gradients for batch of {n}", dlogits.len())));
        }
        let mut dfeat = Tensor::zeros(&[n, self.feature_len]);
        let mut head_grads = Vec::with_capacity(self.heads.len());
        for (h, (head, htape)) in self.heads.iter().zip(&tape.heads).enumerate() {
            let width = self.signature()[h];
            let mut data = Vec::with_capacity(n * width);
            for g in dlogits {
                if g.len() != self.heads.len() || g[h].len() != width {
                    return Err(Error::Policy("logit gradient shape does not match heads".into()));
                }
                data.extend(g[h].iter().map(|&v| v as f32));
            }
            let d = Tensor::from_vec(&[n, width], data)?;
            let (grads, dx) = head.backward(htape, d, BackwardMode::BOTH)?;
            for (a, b) in dfeat.data_mut().iter_mut().zip(dx.expect("input grad").data()) {
                *a += b;
            }
            head_grads.push(grads.expect("param grads"));
        }
        let (bb, _) = self.backbone.backward(&tape.backbone, dfeat, BackwardMode::PARAMS)?;
        let mut tensors = bb.expect("param grads").tensors;
        for g in head_grads {
            tensors.extend(g.tensors);
        }
        Ok(Gradients { tensors })
    }

    pub fn params(&self) -> Vec<&[f32]> {
        let mut p = self.backbone.params();
        for h in &self.heads {
            p.extend(h.params());
        }
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Vec<f32>> {
        let mut p = self.backbone.params_mut();
        for h in &mut self.heads {
            p.extend(h.params_mut());
        }
        p
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    pub fn to_flat(&self) -> Vec<f32> {
        self.params().concat()
    }

    pub fn load_flat(&mut self, flat: &[f32]) -> Result<()> {
        let total = self.num_params();
        if flat.len() != total {
            return Err(Error::Policy(format!(
                "policy blob has {} values, model needs {total}",
                flat.len()
            )));
        }
        let mut offset = 0;
        for p in self.params_mut() {
            let n = p.len();
            p.copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    pub fn checksum(&self) -> u64 {
        aroid_nn::checksum_f32(self.params().into_iter().flatten())
    }

    /// Mutable access to one head's `(weight, bias)`, laid out `[out, in]`.
    pub fn head_params_mut(&mut self, head: usize) -> Option<(&mut Vec<f32>, &mut Vec<f32>)> {
        let mut p = self.heads.get_mut(head)?.params_mut().into_iter();
        Some((p.next()?, p.next()?))
    }
}
