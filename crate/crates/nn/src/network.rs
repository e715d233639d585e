//! Sequential networks, their recorded forward pass, and gradients.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::layers::{self, Cache, Conv2d, Layer, Linear};
use crate::tensor::Tensor;
use crate::NnError;

/// How a convolutional stack is read out into a vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Readout {
    Flatten,
    GlobalAvgPool,
}

/// Declarative description of a plain conv net: one `conv3x3 -> relu -> maxpool2`
/// block per entry of `widths`, a readout, and an optional final linear layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvNetSpec {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub widths: Vec<usize>,
    pub readout: Readout,
    /// Width of the final linear layer; `None` leaves the readout as output.
    pub outputs: Option<usize>,
}

impl ConvNetSpec {
    /// Size of the vector produced by the readout.
    pub fn feature_len(&self) -> usize {
        let mut h = self.height;
        let mut w = self.width;
        let mut c = self.in_channels;
        for &wd in &self.widths {
            c = wd;
            h /= 2;
            w /= 2;
        }
        match self.readout {
            Readout::Flatten => c * h * w,
            Readout::GlobalAvgPool => c,
        }
    }
}

/// What a backward pass should produce.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BackwardMode {
    pub params: bool,
    pub input: bool,
}

impl BackwardMode {
    pub const PARAMS: Self = Self { params: true, input: false };
    pub const INPUT: Self = Self { params: false, input: true };
    pub const BOTH: Self = Self { params: true, input: true };
}

/// Recorded forward pass.
#[derive(Debug)]
pub struct Tape {
    caches: Vec<Cache>,
}

/// Gradients laid out like [`Network::params`]: weight then bias per
/// parameterised layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub tensors: Vec<Vec<f32>>,
}

impl Gradients {
    pub fn global_norm(&self) -> f32 {
        self.tensors
            .iter()
            .flatten()
            .map(|g| (*g as f64) * (*g as f64))
            .sum::<f64>()
            .sqrt() as f32
    }

    /// Rescales in place so the global norm is at most `max_norm`; returns the
    /// norm before clipping.
    pub fn clip_global_norm(&mut self, max_norm: f32) -> f32 {
        let norm = self.global_norm();
        if norm > max_norm && norm > 0.0 {
            let scale = max_norm / (norm + 1e-6);
            self.scale(scale);
        }
        norm
    }

    pub fn scale(&mut self, factor: f32) {
        self.tensors.iter_mut().flatten().for_each(|g| *g *= factor);
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().flatten().all(|g| g.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Network {
    layers: Vec<Layer>,
}

impl Network {
    pub fn from_layers(layers: Vec<Layer>) -> Self {
        Self { layers }
    }

    pub fn build<R: Rng + ?Sized>(spec: &ConvNetSpec, rng: &mut R) -> Self {
        let mut layers = Vec::new();
        let mut c = spec.in_channels;
        for &wd in &spec.widths {
            layers.push(Layer::Conv2d(Conv2d::new(c, wd, rng)));
            layers.push(Layer::Relu);
            layers.push(Layer::MaxPool2);
            c = wd;
        }
        layers.push(match spec.readout {
            Readout::Flatten => Layer::Flatten,
            Readout::GlobalAvgPool => Layer::GlobalAvgPool,
        });
        if let Some(out) = spec.outputs {
            layers.push(Layer::Linear(Linear::new(spec.feature_len(), out, rng)));
        }
        Self { layers }
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor, NnError> {
        self.run(x, false).map(|(out, _)| out)
    }

    pub fn forward_tape(&self, x: &Tensor) -> Result<(Tensor, Tape), NnError> {
        self.run(x, true)
    }

    fn run(&self, x: &Tensor, record: bool) -> Result<(Tensor, Tape), NnError> {
        let mut caches = Vec::with_capacity(if record { self.layers.len() } else { 0 });
        let mut cur: Option<Tensor> = None;
        for layer in &self.layers {
            let input = cur.as_ref().unwrap_or(x);
            let (out, cache) = match layer {
                Layer::Conv2d(conv) => conv.forward(input, record)?,
                Layer::Relu => layers::relu_forward(input, record),
                Layer::MaxPool2 => layers::maxpool_forward(input, record)?,
                Layer::GlobalAvgPool => layers::gap_forward(input, record)?,
                Layer::Flatten => {
                    let n = input.batch();
                    let len = input.item_len();
                    let cache = record.then(|| Cache::Flatten {
                        in_dims: input.dims().to_vec(),
                    });
                    (input.clone().reshape(&[n, len])?, cache)
                }
                Layer::Linear(lin) => lin.forward(input, record)?,
            };
            if let Some(c) = cache {
                caches.push(c);
            }
            cur = Some(out);
        }
        Ok((cur.unwrap_or_else(|| x.clone()), Tape { caches }))
    }

    /// Backpropagates `grad_out` (gradient of a scalar w.r.t. the network
    /// output) through a recorded pass.
    pub fn backward(
        &self,
        tape: &Tape,
        grad_out: Tensor,
        mode: BackwardMode,
    ) -> Result<(Option<Gradients>, Option<Tensor>), NnError> {
        if tape.caches.len() != self.layers.len() {
            return Err(NnError::Shape("tape does not belong to this network".into()));
        }
        let mut grads = mode.params.then(|| self.zero_grads());
        let mut slot = self.param_slot_count();
        let mut dcur = grad_out;
        for (idx, (layer, cache)) in self.layers.iter().zip(&tape.caches).enumerate().rev() {
            let need_input = idx > 0 || mode.input;
            let next = match (layer, cache) {
                (Layer::Conv2d(conv), Cache::Conv { col, in_dims }) => {
                    slot -= 2;
                    let g = grads.as_mut().map(|g| split_pair(&mut g.tensors, slot));
                    conv.backward(col, in_dims, &dcur, g, need_input)
                }
                (Layer::Linear(lin), Cache::Linear { input }) => {
                    slot -= 2;
                    let g = grads.as_mut().map(|g| split_pair(&mut g.tensors, slot));
                    lin.backward(input, &dcur, g, need_input)
                }
                (Layer::Relu, Cache::Relu { out }) => Some(layers::relu_backward(out, &dcur)),
                (Layer::MaxPool2, Cache::MaxPool { argmax, in_dims }) => {
                    Some(layers::maxpool_backward(argmax, in_dims, &dcur))
                }
                (Layer::GlobalAvgPool, Cache::GlobalAvgPool { in_dims }) => {
                    Some(layers::gap_backward(in_dims, &dcur))
                }
                (Layer::Flatten, Cache::Flatten { in_dims }) => Some(dcur.clone().reshape(in_dims)?),
                _ => return Err(NnError::Shape("tape does not belong to this network".into())),
            };
            match next {
                Some(d) => dcur = d,
                None => {
                    return Ok((grads, None));
                }
            }
        }
        Ok((grads, mode.input.then_some(dcur)))
    }

    fn param_slot_count(&self) -> usize {
        self.params().len()
    }

    pub fn zero_grads(&self) -> Gradients {
        Gradients {
            tensors: self.params().iter().map(|p| vec![0.0; p.len()]).collect(),
        }
    }

    pub fn params(&self) -> Vec<&[f32]> {
        let mut out = Vec::new();
        for layer in &self.layers {
            match layer {
                Layer::Conv2d(c) => {
                    out.push(c.weight.as_slice());
                    out.push(c.bias.as_slice());
                }
                Layer::Linear(l) => {
                    out.push(l.weight.as_slice());
                    out.push(l.bias.as_slice());
                }
                _ => {}
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Vec<f32>> {
        let mut out = Vec::new();
        for layer in &mut self.layers {
            match layer {
                Layer::Conv2d(c) => {
                    out.push(&mut c.weight);
                    out.push(&mut c.bias);
                }
                Layer::Linear(l) => {
                    out.push(&mut l.weight);
                    out.push(&mut l.bias);
                }
                _ => {}
            }
        }
        out
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    pub fn to_flat(&self) -> Vec<f32> {
        self.params().concat()
    }

    pub fn load_flat(&mut self, flat: &[f32]) -> Result<(), NnError> {
        let total = self.num_params();
        if flat.len() != total {
            return Err(NnError::Shape(format!(
                "parameter blob has {} values, network needs {total}",
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

    /// FNV-1a over the parameter bit patterns.
    pub fn checksum(&self) -> u64 {
        checksum_f32(self.params().into_iter().flatten())
    }
}

pub fn checksum_f32<'a>(values: impl IntoIterator<Item = &'a f32>) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for v in values {
        for b in v.to_bits().to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
    }
    h
}

fn split_pair(tensors: &mut [Vec<f32>], slot: usize) -> (&mut [f32], &mut [f32]) {
    let (a, b) = tensors[slot..slot + 2].split_at_mut(1);
    (a[0].as_mut_slice(), b[0].as_mut_slice())
}
