//! Dense per-pixel feature maps.

use std::path::Path;

use crate::tensorio::{read_tensor, write_tensor, Tensor};
use crate::{Error, Result};

/// `height × width × channels` row-major features.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl FeatureMap {
    pub fn zeros(width: usize, height: usize, channels: usize) -> Self {
        FeatureMap { width, height, channels, data: vec![0.0; width * height * channels] }
    }

    pub fn constant(width: usize, height: usize, value: &[f32]) -> Self {
        let data = value.iter().copied().cycle().take(width * height * value.len()).collect();
        FeatureMap { width, height, channels: value.len(), data }
    }

    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != width * height * channels {
            return Err(Error::Argument(format!(
                "feature map {width}x{height}x{channels} needs {} values, got {}",
                width * height * channels,
                data.len()
            )));
        }
        Ok(FeatureMap { width, height, channels, data })
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> &[f32] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    #[inline]
    pub fn at_mut(&mut self, x: usize, y: usize) -> &mut [f32] {
        let i = (y * self.width + x) * self.channels;
        &mut self.data[i..i + self.channels]
    }

    pub fn to_tensor(&self) -> Result<Tensor> {
        Tensor::from_f32(vec![self.height, self.width, self.channels], self.data.clone())
    }

    pub fn from_tensor(t: Tensor) -> Result<Self> {
        let shape = t.shape().to_vec();
        if shape.len() != 3 {
            return Err(Error::Format(format!("feature map must be rank 3, got {shape:?}")));
        }
        FeatureMap::new(shape[1], shape[0], shape[2], t.into_f32()?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_tensor(path, &self.to_tensor()?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_tensor(read_tensor(path)?)
    }
}
