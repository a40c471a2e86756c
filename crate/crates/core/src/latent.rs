//! Latent "images": `C×H×W` tensors in channel-major order.

use crate::error::{Error, Result};

pub type LatentShape = (usize, usize, usize);

#[derive(Clone, Debug, PartialEq)]
pub struct LatentImage {
    pub shape: LatentShape,
    pub data: Vec<f64>,
}

impl LatentImage {
    pub fn new(shape: LatentShape, data: Vec<f64>) -> Self {
        assert_eq!(shape.0 * shape.1 * shape.2, data.len(), "latent data length");
        Self { shape, data }
    }

    pub fn zeros(shape: LatentShape) -> Self {
        Self::new(shape, vec![0.0; shape.0 * shape.1 * shape.2])
    }

    pub fn dim(&self) -> usize {
        self.data.len()
    }

    pub fn channels(&self) -> usize {
        self.shape.0
    }

    pub fn check_same_shape(&self, other: &LatentImage) -> Result<()> {
        if self.shape == other.shape {
            Ok(())
        } else {
            Err(Error::Shape(format!("latent {:?} vs {:?}", self.shape, other.shape)))
        }
    }

    pub fn channel_of(&self, flat: usize) -> usize {
        flat / (self.shape.1 * self.shape.2)
    }

    /// Elementwise mean of equally shaped latents.
    pub fn mean(items: &[&LatentImage]) -> Result<LatentImage> {
        let first = items.first().ok_or_else(|| Error::Shape("mean of no latents".into()))?;
        let mut acc = vec![0.0; first.dim()];
        for z in items {
            first.check_same_shape(z)?;
            for (a, &v) in acc.iter_mut().zip(&z.data) {
                *a += v;
            }
        }
        let n = items.len() as f64;
        acc.iter_mut().for_each(|a| *a /= n);
        Ok(LatentImage::new(first.shape, acc))
    }

    /// `(1 − w)·self + w·other`.
    pub fn mix(&self, other: &LatentImage, w: f64) -> Result<LatentImage> {
        self.check_same_shape(other)?;
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| (1.0 - w) * a + w * b).collect();
        Ok(LatentImage::new(self.shape, data))
    }

    pub fn l2_distance(&self, other: &LatentImage) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
    }

    /// Little-endian `f32` bytes.
    pub fn to_f32_bytes(&self) -> Vec<u8> {
        self.data.iter().flat_map(|&v| (v as f32).to_le_bytes()).collect()
    }

    pub fn from_f32_bytes(shape: LatentShape, bytes: &[u8]) -> Result<LatentImage> {
        let n = shape.0 * shape.1 * shape.2;
        if bytes.len() != 4 * n {
            return Err(Error::Format(format!("latent needs {} bytes, got {}", 4 * n, bytes.len())));
        }
        let data = bytes
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
            .collect();
        Ok(LatentImage::new(shape, data))
    }

    /// Rounds every element through `f32`, matching what file round-trips preserve.
    pub fn quantized(&self) -> LatentImage {
        LatentImage::new(self.shape, self.data.iter().map(|&v| f64::from(v as f32)).collect())
    }
}
