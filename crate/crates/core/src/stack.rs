//! Per-utterance frame embeddings from every encoder layer.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Frame embeddings of one utterance with shape `[layers, frames, dim]`,
/// stored layer-major then frame-major.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerStack {
    tensor: Tensor<f32>,
}

impl LayerStack {
    pub fn new(layers: usize, frames: usize, dim: usize, data: Vec<f32>) -> Result<Self> {
        Ok(LayerStack {
            tensor: Tensor::new(vec![layers, frames, dim], data)?,
        })
    }

    pub fn from_tensor(tensor: Tensor<f32>) -> Result<Self> {
        if tensor.rank() != 3 {
            return Err(Error::dim(
                "layer_stack",
                format!("expected [layers, frames, dim], got {:?}", tensor.shape()),
            ));
        }
        Ok(LayerStack { tensor })
    }

    pub fn layers(&self) -> usize {
        self.tensor.shape()[0]
    }

    pub fn frames(&self) -> usize {
        self.tensor.shape()[1]
    }

    pub fn dim(&self) -> usize {
        self.tensor.shape()[2]
    }

    pub fn data(&self) -> &[f32] {
        self.tensor.data()
    }

    pub fn tensor(&self) -> &Tensor<f32> {
        &self.tensor
    }

    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        self.tensor.cast()
    }

    /// Frame `t` of layer `l`.
    pub fn frame(&self, l: usize, t: usize) -> &[f32] {
        let d = self.dim();
        let start = (l * self.frames() + t) * d;
        &self.tensor.data()[start..start + d]
    }

    /// Keeps frames `[start, start + len)` of every layer.
    pub fn crop(&self, start: usize, len: usize) -> Result<LayerStack> {
        if len == 0 || start + len > self.frames() {
            return Err(Error::Parameter(format!(
                "crop [{start}, {}) outside {} frames",
                start + len,
                self.frames()
            )));
        }
        let mut data = Vec::with_capacity(self.layers() * len * self.dim());
        for l in 0..self.layers() {
            for t in start..start + len {
                data.extend_from_slice(self.frame(l, t));
            }
        }
        LayerStack::new(self.layers(), len, self.dim(), data)
    }

    /// Uniformly random contiguous window of `frames` frames; stacks that
    /// are already short enough are returned unchanged.
    pub fn random_window<R: Rng + ?Sized>(&self, frames: usize, rng: &mut R) -> LayerStack {
        if frames == 0 || self.frames() <= frames {
            return self.clone();
        }
        let start = rng.random_range(0..=self.frames() - frames);
        self.crop(start, frames).expect("window inside stack")
    }

    /// Mean over layers and frames.
    pub fn mean_frame(&self) -> Vec<f64> {
        let d = self.dim();
        let mut out = vec![0.0; d];
        for chunk in self.tensor.data().chunks_exact(d) {
            for (o, &v) in out.iter_mut().zip(chunk) {
                *o += v as f64;
            }
        }
        let n = (self.layers() * self.frames()) as f64;
        out.iter_mut().for_each(|o| *o /= n);
        out
    }
}
