use crate::error::{Error, Result};

/// Square single-channel image with intensities stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    size: usize,
    pixels: Vec<f64>,
}

impl Image {
    pub fn new(size: usize, pixels: Vec<f64>) -> Result<Self> {
        if size == 0 || pixels.len() != size * size {
            return Err(Error::Input(format!(
                "image of side {size} needs {} pixels, got {}",
                size * size,
                pixels.len()
            )));
        }
        Ok(Self { size, pixels })
    }

    pub fn zeros(size: usize) -> Self {
        Self {
            size,
            pixels: vec![0.0; size * size],
        }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.pixels[row * self.size + col]
    }

    pub(crate) fn pixels_mut(&mut self) -> &mut [f64] {
        &mut self.pixels
    }
}
