//! Images with values in `[0, 1]`, stored channel-planar (`C x H x W`).

use aroid_nn::Tensor;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

/// 8-bit level of a `[0, 1]` value.
pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Inverse of [`quantize`]; `quantize(dequantize(k)) == k` for every level.
pub fn dequantize(level: u8) -> f32 {
    level as f32 / 255.0
}

impl Image {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::Input(format!("unsupported channel count {channels}")));
        }
        if data.len() != channels * height * width {
            return Err(Error::Input(format!(
                "{}x{}x{} image needs {} values, got {}",
                channels,
                height,
                width,
                channels * height * width,
                data.len()
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f32) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![value; channels * height * width],
        }
    }

    /// Builds an image from 8-bit planar levels.
    pub fn from_levels(channels: usize, height: usize, width: usize, levels: &[u8]) -> Result<Self> {
        Self::new(channels, height, width, levels.iter().map(|&l| dequantize(l)).collect())
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// `(C, H, W)`
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f32] {
        let n = self.height * self.width;
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn levels(&self) -> Vec<u8> {
        self.data.iter().map(|&v| quantize(v)).collect()
    }

    pub fn in_unit_range(&self) -> bool {
        self.data.iter().all(|v| (0.0..=1.0).contains(v))
    }
}

/// Stacks same-shaped images into an `[N, C, H, W]` tensor.
pub fn batch_tensor<'a, I>(images: I) -> Result<Tensor>
where
    I: IntoIterator<Item = &'a Image>,
{
    let mut iter = images.into_iter().peekable();
    let first = iter
        .peek()
        .ok_or_else(|| Error::Input("empty batch".into()))?;
    let (c, h, w) = first.shape();
    let mut data = Vec::new();
    let mut n = 0;
    for img in iter {
        if img.shape() != (c, h, w) {
            return Err(Error::Input(format!(
                "batch item {n} has shape {:?}, expected {:?}",
                img.shape(),
                (c, h, w)
            )));
        }
        data.extend_from_slice(&img.data);
        n += 1;
    }
    Ok(Tensor::from_vec(&[n, c, h, w], data)?)
}

/// Splits an `[N, C, H, W]` tensor back into images.
pub fn tensor_images(t: &Tensor) -> Result<Vec<Image>> {
    match t.dims() {
        &[_, c, h, w] => t
            .iter_items()
            .map(|item| Image::new(c, h, w, item.to_vec()))
            .collect(),
        d => Err(Error::Input(format!("expected an image batch, got {d:?}"))),
    }
}
