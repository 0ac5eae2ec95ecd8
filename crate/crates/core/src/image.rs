use crate::error::{Error, Result};
use crate::geometry::Extent;

/// A `C x F` input tensor, channel-major: `data[c * |F| + q]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    channels: usize,
    extent: Extent,
    data: Vec<f64>,
}

impl Image {
    pub fn new(channels: usize, extent: Extent, data: Vec<f64>) -> Result<Self> {
        if channels == 0 {
            return Err(Error::Shape("image needs at least one channel".into()));
        }
        if data.len() != channels * extent.len() {
            return Err(Error::Shape(format!(
                "{channels} channels over {:?} need {} values, got {}",
                extent.dims(),
                channels * extent.len(),
                data.len()
            )));
        }
        Ok(Image {
            channels,
            extent,
            data,
        })
    }

    pub fn zeros(channels: usize, extent: Extent) -> Self {
        let n = channels * extent.len();
        Image {
            channels,
            extent,
            data: vec![0.0; n],
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn extent(&self) -> &Extent {
        &self.extent
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.extent.len();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn get(&self, c: usize, q: usize) -> f64 {
        self.data[c * self.extent.len() + q]
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.channels == other.channels && self.extent == other.extent
    }
}
