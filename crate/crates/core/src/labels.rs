//! Closed-set label maps: 0 background, 1 eye, 2 iris, 3 pupil.

use serde::{Deserialize, Serialize};

use crate::error::{shape, Error, Result};

pub const NUM_CLASSES: usize = 4;
pub const BACKGROUND: u8 = 0;
pub const EYE: u8 = 1;
pub const IRIS: u8 = 2;
pub const PUPIL: u8 = 3;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(shape(format!(
                "label map {}x{} needs {} values, got {}",
                height,
                width,
                height * width,
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: u8) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.data[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, v: u8) {
        self.data[row * self.width + col] = v;
    }

    /// Errors with `sample_id` if any value is outside the closed set.
    pub fn validate(&self, sample_id: &str) -> Result<()> {
        if let Some(pos) = self.data.iter().position(|&v| v as usize >= NUM_CLASSES) {
            return Err(Error::Dataset {
                sample_id: sample_id.to_string(),
                detail: format!(
                    "label value {} at pixel ({}, {}) outside {{0,1,2,3}}",
                    self.data[pos],
                    pos / self.width,
                    pos % self.width
                ),
            });
        }
        Ok(())
    }

    pub fn histogram(&self) -> [usize; NUM_CLASSES] {
        let mut h = [0; NUM_CLASSES];
        for &v in &self.data {
            h[v as usize] += 1;
        }
        h
    }

    pub fn count(&self, class: u8) -> usize {
        self.data.iter().filter(|&&v| v == class).count()
    }
}
