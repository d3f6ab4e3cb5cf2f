//! Plain row-major float images.

use nalgebra::Vector3;

#[derive(Debug, Clone, PartialEq)]
pub struct ImageRgb {
    pub width: usize,
    pub height: usize,
    pub data: Vec<Vector3<f64>>,
}

impl ImageRgb {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![Vector3::zeros(); width * height],
        }
    }

    pub fn filled(width: usize, height: usize, value: Vector3<f64>) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> Vector3<f64> {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: Vector3<f64>) {
        self.data[y * self.width + x] = v;
    }

    pub fn same_shape(&self, other: &ImageRgb) -> bool {
        self.width == other.width && self.height == other.height
    }

    /// One channel as a flat buffer.
    pub fn channel(&self, c: usize) -> Vec<f64> {
        self.data.iter().map(|p| p[c]).collect()
    }
}

/// Z-depth in metres; `0` marks an invalid pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl DepthMap {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width * height],
        }
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f64) {
        self.data[y * self.width + x] = v;
    }
}
