//! Per-pixel, per-label arrays shared by correlation, CRF and training.

use crate::error::{dim_err, Result};

/// Scalar per (pixel, label), stored pixel-major: entry `(i, k)` is at
/// `i * labels + k` with `i = r * width + c`. `valid` marks labels whose
/// disparity stays inside the image.
#[derive(Clone, Debug, PartialEq)]
pub struct CostVolume {
    pub height: usize,
    pub width: usize,
    pub labels: usize,
    pub values: Vec<f64>,
    pub valid: Vec<bool>,
}

impl CostVolume {
    /// All entries zero and valid.
    pub fn zeros(height: usize, width: usize, labels: usize) -> Self {
        let n = height * width * labels;
        CostVolume {
            height,
            width,
            labels,
            values: vec![0.0; n],
            valid: vec![true; n],
        }
    }

    pub fn from_values(height: usize, width: usize, labels: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != height * width * labels {
            return Err(dim_err("cost volume size does not match dimensions"));
        }
        Ok(CostVolume {
            height,
            width,
            labels,
            valid: vec![true; values.len()],
            values,
        })
    }

    #[inline]
    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    #[inline]
    pub fn at(&self, pixel: usize, k: usize) -> f64 {
        self.values[pixel * self.labels + k]
    }

    #[inline]
    pub fn pixel(&self, pixel: usize) -> &[f64] {
        &self.values[pixel * self.labels..(pixel + 1) * self.labels]
    }

    #[inline]
    pub fn pixel_mut(&mut self, pixel: usize) -> &mut [f64] {
        let l = self.labels;
        &mut self.values[pixel * l..(pixel + 1) * l]
    }

    #[inline]
    pub fn pixel_valid(&self, pixel: usize) -> &[bool] {
        &self.valid[pixel * self.labels..(pixel + 1) * self.labels]
    }

    pub fn same_shape(&self, other: &CostVolume) -> bool {
        self.height == other.height && self.width == other.width && self.labels == other.labels
    }
}

/// Integer disparity per pixel, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Labeling {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<usize>,
}

impl Labeling {
    pub fn new(height: usize, width: usize, labels: Vec<usize>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(dim_err("labeling size does not match dimensions"));
        }
        Ok(Labeling { height, width, labels })
    }

    pub fn filled(height: usize, width: usize, label: usize) -> Self {
        Labeling {
            height,
            width,
            labels: vec![label; height * width],
        }
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> usize {
        self.labels[r * self.width + c]
    }

    pub fn to_disparity(&self) -> Vec<f64> {
        self.labels.iter().map(|l| *l as f64).collect()
    }
}

/// Index of the minimum; ties go to the smallest index.
pub(crate) fn argmin(values: &[f64]) -> usize {
    let mut best = 0;
    for (k, v) in values.iter().enumerate().skip(1) {
        if *v < values[best] {
            best = k;
        }
    }
    best
}
