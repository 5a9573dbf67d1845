use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::image::ImageTensor;

/// Resize to a square, take a random square crop, optionally mirror.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Augmentation {
    pub resize_to: usize,
    pub crop_to: usize,
    pub hflip: bool,
}

/// One sampled augmentation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AugmentDraw {
    pub top: usize,
    pub left: usize,
    pub flip: bool,
}

impl Augmentation {
    pub fn validate(&self) -> Result<()> {
        if self.crop_to == 0 || self.crop_to > self.resize_to {
            return Err(Error::InvalidArgument(format!(
                "crop {} must be in 1..={}",
                self.crop_to, self.resize_to
            )));
        }
        Ok(())
    }

    /// Offsets uniform over the `resize_to - crop_to + 1` valid positions per
    /// axis; flip with probability 1/2 when enabled.
    pub fn draw(&self, rng: &mut ChaCha8Rng) -> AugmentDraw {
        let span = self.resize_to - self.crop_to;
        let top = rng.random_range(0..=span);
        let left = rng.random_range(0..=span);
        let flip = self.hflip && rng.random::<bool>();
        AugmentDraw { top, left, flip }
    }

    pub fn apply(&self, img: &ImageTensor, draw: AugmentDraw) -> Result<ImageTensor> {
        let resized = img.resize(self.resize_to, self.resize_to)?;
        let crop = resized.crop(draw.top, draw.left, self.crop_to, self.crop_to)?;
        Ok(if draw.flip { crop.hflip() } else { crop })
    }
}
