//! Pixel grids shared by every stage: input images, binary masks, logits and prompts.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Single-channel image with intensities in `[0, 1]`, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageGrid {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl ImageGrid {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Empty("image has a zero dimension"));
        }
        if data.len() != height * width {
            return Err(Error::ShapeMismatch {
                expected: (height, width),
                actual: (data.len() / width.max(1), width),
            });
        }
        if let Some(v) = data.iter().find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0) {
            return Err(Error::InvalidPrompt(format!(
                "image intensity {v} outside [0, 1]"
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn from_u8(height: usize, width: usize, bytes: &[u8]) -> Result<Self> {
        Self::new(
            height,
            width,
            bytes.iter().map(|&b| b as f32 / 255.0).collect(),
        )
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Result<Self> {
        Self::new(height, width, vec![value; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.data[y * self.width + x]
    }

    pub fn to_u8(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect()
    }

    /// Zero-pads the bottom and right edges so both dimensions divide `multiple`.
    pub fn padded_to(&self, multiple: usize) -> ImageGrid {
        let h = self.height.div_ceil(multiple) * multiple;
        let w = self.width.div_ceil(multiple) * multiple;
        if (h, w) == self.shape() {
            return self.clone();
        }
        let mut data = vec![0.0; h * w];
        for y in 0..self.height {
            data[y * w..y * w + self.width]
                .copy_from_slice(&self.data[y * self.width..(y + 1) * self.width]);
        }
        ImageGrid {
            height: h,
            width: w,
            data,
        }
    }
}

/// Per-pixel `{0, 1}` mask, row-major.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::ShapeMismatch {
                expected: (height, width),
                actual: (data.len() / width.max(1), width),
            });
        }
        if data.iter().any(|&v| v > 1) {
            return Err(Error::InvalidPrompt("mask values must be 0 or 1".into()));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0; height * width],
        }
    }

    pub fn full(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![1; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x) as u8);
            }
        }
        Self {
            height,
            width,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x] != 0
    }

    pub fn set(&mut self, y: usize, x: usize, value: bool) {
        self.data[y * self.width + x] = value as u8;
    }

    pub fn count(&self) -> usize {
        self.data.iter().map(|&v| v as usize).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.data.iter().all(|&v| v == 0)
    }

    pub fn ensure_same_shape(&self, other: &BinaryMask) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::ShapeMismatch {
                expected: self.shape(),
                actual: other.shape(),
            });
        }
        Ok(())
    }

    pub fn intersection_count(&self, other: &BinaryMask) -> usize {
        self.data
            .iter()
            .zip(&other.data)
            .filter(|(a, b)| **a != 0 && **b != 0)
            .count()
    }

    /// Pixels set here and not in `other`.
    pub fn minus(&self, other: &BinaryMask) -> BinaryMask {
        BinaryMask {
            height: self.height,
            width: self.width,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| (*a != 0 && *b == 0) as u8)
                .collect(),
        }
    }

    pub fn xor(&self, other: &BinaryMask) -> BinaryMask {
        BinaryMask {
            height: self.height,
            width: self.width,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a ^ b)
                .collect(),
        }
    }

    /// Tight box with exclusive upper corner, or `None` for an empty mask.
    pub fn bounding_box(&self) -> Option<BoxPrompt> {
        let mut x0 = usize::MAX;
        let mut y0 = usize::MAX;
        let mut x1 = 0;
        let mut y1 = 0;
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(y, x) {
                    x0 = x0.min(x);
                    y0 = y0.min(y);
                    x1 = x1.max(x + 1);
                    y1 = y1.max(y + 1);
                }
            }
        }
        (x0 != usize::MAX).then_some(BoxPrompt { x0, y0, x1, y1 })
    }

    /// Mean `(x, y)` of the foreground pixels.
    pub fn centroid(&self) -> Option<(f64, f64)> {
        let mut sx = 0.0;
        let mut sy = 0.0;
        let mut n = 0usize;
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(y, x) {
                    sx += x as f64;
                    sy += y as f64;
                    n += 1;
                }
            }
        }
        (n > 0).then(|| (sx / n as f64, sy / n as f64))
    }

    /// Foreground pixels as `(x, y)` in row-major order.
    pub fn foreground(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.data
            .iter()
            .enumerate()
            .filter(|(_, v)| **v != 0)
            .map(move |(i, _)| (i % self.width, i / self.width))
    }
}

/// Pre-sigmoid per-pixel confidence.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskLogits {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl MaskLogits {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::ShapeMismatch {
                expected: (height, width),
                actual: (data.len() / width.max(1), width),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidPrompt("non-finite logit".into()));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Pixel is foreground when `sigmoid(logit) >= threshold` (inclusive).
    pub fn binarize(&self, threshold: f64) -> BinaryMask {
        BinaryMask {
            height: self.height,
            width: self.width,
            data: self
                .data
                .iter()
                .map(|&z| (sigmoid(z) >= threshold) as u8)
                .collect(),
        }
    }
}

pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Positive,
    Negative,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Point {
    /// Column index.
    pub x: usize,
    /// Row index.
    pub y: usize,
    pub label: Label,
}

impl Point {
    pub fn positive(x: usize, y: usize) -> Self {
        Self {
            x,
            y,
            label: Label::Positive,
        }
    }

    pub fn negative(x: usize, y: usize) -> Self {
        Self {
            x,
            y,
            label: Label::Negative,
        }
    }
}

/// Axis-aligned box covering columns `x0..x1` and rows `y0..y1` (upper bounds exclusive).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BoxPrompt {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl BoxPrompt {
    pub fn contains_box(&self, other: &BoxPrompt) -> bool {
        self.x0 <= other.x0 && self.y0 <= other.y0 && self.x1 >= other.x1 && self.y1 >= other.y1
    }

    pub fn width(&self) -> usize {
        self.x1 - self.x0
    }

    pub fn height(&self) -> usize {
        self.y1 - self.y0
    }
}

/// Conditioning input of the model: ordered clicks plus an optional box.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PromptSet {
    pub points: Vec<Point>,
    #[serde(rename = "box", default, skip_serializing_if = "Option::is_none")]
    pub bbox: Option<BoxPrompt>,
}

impl PromptSet {
    pub fn from_point(point: Point) -> Self {
        Self {
            points: vec![point],
            bbox: None,
        }
    }

    pub fn from_box(bbox: BoxPrompt) -> Self {
        Self {
            points: Vec::new(),
            bbox: Some(bbox),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty() && self.bbox.is_none()
    }

    /// Number of prompt tokens the encoder produces: one per point and two per box.
    pub fn token_count(&self) -> usize {
        self.points.len() + if self.bbox.is_some() { 2 } else { 0 }
    }

    pub fn with_point(&self, point: Point) -> Self {
        let mut next = self.clone();
        next.points.push(point);
        next
    }

    pub fn validate(&self, height: usize, width: usize) -> Result<()> {
        if self.is_empty() {
            return Err(Error::NoPrompt);
        }
        self.validate_bounds(height, width)
    }

    pub fn validate_bounds(&self, height: usize, width: usize) -> Result<()> {
        for p in &self.points {
            if p.x >= width || p.y >= height {
                return Err(Error::InvalidPrompt(format!(
                    "point ({}, {}) outside {}x{} image",
                    p.x, p.y, width, height
                )));
            }
        }
        if let Some(b) = &self.bbox {
            if b.x0 >= b.x1 || b.y0 >= b.y1 {
                return Err(Error::InvalidPrompt(format!(
                    "degenerate box ({}, {}, {}, {})",
                    b.x0, b.y0, b.x1, b.y1
                )));
            }
            if b.x1 > width || b.y1 > height {
                return Err(Error::InvalidPrompt(format!(
                    "box ({}, {}, {}, {}) outside {}x{} image",
                    b.x0, b.y0, b.x1, b.y1, width, height
                )));
            }
        }
        Ok(())
    }
}
