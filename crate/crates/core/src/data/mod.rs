//! Stereo samples, synthetic generation and on-disk formats.

pub mod disk;
pub mod pfm;
pub mod png16;
pub mod synth;
pub mod visual;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use synth::{generate_stereogram, GeneratorConfig, StereogramParams, Texture};

/// One rectified pair with dense ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct StereoSample {
    /// `[3,H,W]` in `[0,1]`.
    pub left: Tensor<f32>,
    pub right: Tensor<f32>,
    /// `[1,H,W]`, in pixels.
    pub disparity: Tensor<f32>,
    /// `[1,H,W]`, 1 where the ground truth is usable.
    pub valid: Tensor<f32>,
    /// `[1,H,W]`, binary edge labels.
    pub edges: Tensor<f32>,
}

impl StereoSample {
    pub fn extents(&self) -> (usize, usize) {
        let s = self.left.shape();
        (s[1], s[2])
    }

    fn check(&self) -> Result<()> {
        let (h, w) = match *self.left.shape() {
            [3, h, w] => (h, w),
            ref s => return Err(Error::shape("sample", format!("left view must be [3,H,W], got {s:?}"))),
        };
        let plane = [1, h, w];
        if self.right.shape() != self.left.shape()
            || self.disparity.shape() != plane
            || self.valid.shape() != plane
            || self.edges.shape() != plane
        {
            return Err(Error::shape("sample", "views, disparity, mask and edges disagree on extents"));
        }
        Ok(())
    }
}

/// Samples stacked along a leading batch axis.
#[derive(Clone, Debug)]
pub struct Batch {
    pub left: Tensor<f32>,
    pub right: Tensor<f32>,
    pub disparity: Tensor<f32>,
    pub valid: Tensor<f32>,
    pub edges: Tensor<f32>,
}

#[derive(Clone, Debug, Default)]
pub struct Dataset {
    samples: Vec<StereoSample>,
}

impl Dataset {
    pub fn new(samples: Vec<StereoSample>) -> Result<Self> {
        for s in &samples {
            s.check()?;
            if s.extents() != samples[0].extents() {
                return Err(Error::shape("dataset", "all samples must share extents"));
            }
        }
        Ok(Dataset { samples })
    }

    /// `n` generated samples; sample `i` depends only on `(config, seed, i)`.
    pub fn synthetic(config: &GeneratorConfig, n: usize, seed: u64) -> Result<Self> {
        let samples = (0..n)
            .into_par_iter()
            .map(|i| config.sample(seed, i))
            .collect::<Result<Vec<_>>>()?;
        Dataset::new(samples)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn samples(&self) -> &[StereoSample] {
        &self.samples
    }

    pub fn get(&self, i: usize) -> Option<&StereoSample> {
        self.samples.get(i)
    }

    /// `(height, width)` of every sample.
    pub fn extents(&self) -> Option<(usize, usize)> {
        self.samples.first().map(StereoSample::extents)
    }

    pub fn batch(&self, indices: &[usize]) -> Result<Batch> {
        if indices.is_empty() {
            return Err(Error::Empty("batch"));
        }
        let picked = indices
            .iter()
            .map(|&i| {
                self.samples.get(i).ok_or(Error::DatasetExhausted {
                    available: self.samples.len(),
                    required: i + 1,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let stack = |f: fn(&StereoSample) -> &Tensor<f32>| {
            Tensor::stack(&picked.iter().map(|s| f(s)).collect::<Vec<_>>())
        };
        Ok(Batch {
            left: stack(|s| &s.left)?,
            right: stack(|s| &s.right)?,
            disparity: stack(|s| &s.disparity)?,
            valid: stack(|s| &s.valid)?,
            edges: stack(|s| &s.edges)?,
        })
    }
}
