//! Datasets and preprocessing.

pub mod cifar;
pub mod image_dir;
pub mod synthetic;
pub mod transform;

use crate::error::{Error, Result};

/// An `H x W x 3` image with raw pixel values in `[0, 255]`, interleaved RGB.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != height * width * 3 {
            return Err(Error::InvalidShape {
                shape: vec![height, width, 3],
                reason: format!("image buffer holds {} values", data.len()),
            });
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        let data = (0..height * width).flat_map(|_| rgb).collect();
        Self {
            height,
            width,
            data,
        }
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Image,
    pub label: usize,
}

#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn new(samples: Vec<Sample>, num_classes: usize) -> Result<Self> {
        if let Some(s) = samples.iter().find(|s| s.label >= num_classes) {
            return Err(Error::InvalidArgument(format!(
                "label {} out of range for {num_classes} classes",
                s.label
            )));
        }
        Ok(Self {
            samples,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn class_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.num_classes];
        for s in &self.samples {
            h[s.label] += 1;
        }
        h
    }

    pub fn truncated(mut self, n: Option<usize>) -> Self {
        if let Some(n) = n {
            self.samples.truncate(n);
        }
        self
    }
}
