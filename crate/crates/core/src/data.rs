//! In-memory concept datasets: RGB images, binary concept masks, per-cell labels.

use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{shape_err, Error, Result};
use crate::nn::LabeledImage;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sample {
    pub id: usize,
    pub width: usize,
    pub height: usize,
    /// Interleaved 8-bit RGB, row-major.
    pub rgb: Vec<u8>,
    /// One byte per pixel, 0 or 1.
    pub concept_mask: Vec<u8>,
    pub concept_label: u8,
    /// Class id per grid cell, row-major; 0 is background.
    pub cells: Vec<u8>,
}

impl Sample {
    /// `[1, 3, H, W]` with values in `[0, 1]`.
    pub fn image(&self) -> Tensor {
        let plane = self.width * self.height;
        Tensor::from_fn(&[1, 3, self.height, self.width], |i| {
            let (c, p) = (i / plane, i % plane);
            self.rgb[p * 3 + c] as f32 / 255.0
        })
    }

    /// `[H, W]` mask with values 0.0 / 1.0.
    pub fn mask(&self) -> Tensor {
        Tensor::from_fn(&[self.height, self.width], |i| self.concept_mask[i] as f32)
    }

    pub fn has_class(&self, class_id: u8) -> bool {
        self.cells.contains(&class_id)
    }

    pub fn validate(&self, grid_cells: usize) -> Result<()> {
        let plane = self.width * self.height;
        if self.rgb.len() != plane * 3 || self.concept_mask.len() != plane {
            return Err(shape_err!("sample {} buffers do not match {}x{}", self.id, self.width, self.height));
        }
        if self.cells.len() != grid_cells {
            return Err(shape_err!("sample {} has {} cell labels, expected {}", self.id, self.cells.len(), grid_cells));
        }
        if self.concept_mask.iter().any(|&m| m > 1) || self.concept_label > 1 {
            return Err(Error::Data(alloc::format!("sample {} has a non-binary mask or label", self.id)));
        }
        let present = self.concept_mask.contains(&1);
        if present != (self.concept_label == 1) {
            return Err(Error::Data(alloc::format!("sample {} label disagrees with its mask", self.id)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    pub concept: String,
    pub width: usize,
    pub height: usize,
    pub grid: (usize, usize),
    /// Number of cell classes including background.
    pub classes: usize,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        for s in &self.samples {
            if (s.width, s.height) != (self.width, self.height) {
                return Err(shape_err!("sample {} is {}x{}, dataset is {}x{}", s.id, s.width, s.height, self.width, self.height));
            }
            s.validate(self.grid.0 * self.grid.1)?;
            if let Some(&c) = s.cells.iter().find(|&&c| c as usize >= self.classes) {
                return Err(Error::Data(alloc::format!("sample {} uses class {c} of {}", s.id, self.classes)));
            }
        }
        Ok(())
    }

    /// Per-channel mean intensity in `[0, 1]` over all images.
    pub fn channel_means(&self) -> [f32; 3] {
        let mut sums = [0.0f64; 3];
        let mut count = 0usize;
        for s in &self.samples {
            for px in s.rgb.chunks_exact(3) {
                for c in 0..3 {
                    sums[c] += px[c] as f64 / 255.0;
                }
                count += 1;
            }
        }
        let n = count.max(1) as f64;
        [(sums[0] / n) as f32, (sums[1] / n) as f32, (sums[2] / n) as f32]
    }

    pub fn images(&self) -> Vec<Tensor> {
        self.samples.iter().map(Sample::image).collect()
    }

    /// Pair pre-built `images` (see [`Dataset::images`]) with the cell labels.
    pub fn labeled<'a>(&'a self, images: &'a [Tensor]) -> Vec<LabeledImage<'a>> {
        images
            .iter()
            .zip(&self.samples)
            .map(|(image, s)| LabeledImage { image, cells: &s.cells })
            .collect()
    }

    pub fn subset(&self, range: core::ops::Range<usize>) -> Dataset {
        Dataset {
            concept: self.concept.clone(),
            width: self.width,
            height: self.height,
            grid: self.grid,
            classes: self.classes,
            samples: self.samples[range].to_vec(),
        }
    }
}
