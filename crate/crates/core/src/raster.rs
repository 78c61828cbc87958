//! Single-channel rasters: grayscale images in `[0, 1]` and binary masks.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Raster<P> {
    height: usize,
    width: usize,
    pixels: Vec<P>,
}

pub type Image = Raster<f32>;
pub type Mask = Raster<bool>;

impl<P: Copy> Raster<P> {
    pub fn new(height: usize, width: usize, pixels: Vec<P>) -> Result<Self> {
        if height == 0 || width == 0 || pixels.len() != height * width {
            return Err(Error::dim(
                "raster",
                format!(
                    "{height}×{width} raster cannot hold {} pixels",
                    pixels.len()
                ),
            ));
        }
        Ok(Self {
            height,
            width,
            pixels,
        })
    }

    pub fn filled(height: usize, width: usize, value: P) -> Self {
        Self {
            height,
            width,
            pixels: vec![value; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> P) -> Self {
        let pixels = (0..height * width)
            .map(|i| f(i / width, i % width))
            .collect();
        Self {
            height,
            width,
            pixels,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    pub fn get(&self, row: usize, col: usize) -> P {
        self.pixels[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: P) {
        self.pixels[row * self.width + col] = value;
    }

    pub fn pixels(&self) -> &[P] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [P] {
        &mut self.pixels
    }

    pub fn map<Q: Copy>(&self, f: impl Fn(P) -> Q) -> Raster<Q> {
        Raster {
            height: self.height,
            width: self.width,
            pixels: self.pixels.iter().map(|&p| f(p)).collect(),
        }
    }
}

impl Mask {
    pub fn count(&self) -> usize {
        self.pixels.iter().filter(|&&p| p).count()
    }
}
