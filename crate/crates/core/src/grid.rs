//! Dense real-valued grids shared by every stage of the sampler.
//!
//! Both [`LatentGrid`] and [`FeatureGrid`] store their values channel-major,
//! then row-major: element `(c, y, x)` lives at `c * h * w + y * w + x`.
//! Golden files and the brute-force references in the tests rely on this
//! layout.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, mismatch, Result};

/// A `channels × height × width` field of finite reals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentGrid {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

fn check_dims(what: &str, c: usize, h: usize, w: usize) -> Result<()> {
    if c == 0 || h == 0 || w == 0 {
        return invalid(format!("{what} dimensions must be positive, got {c}x{h}x{w}"));
    }
    Ok(())
}

fn check_data(what: &str, c: usize, h: usize, w: usize, data: &[f64]) -> Result<()> {
    check_dims(what, c, h, w)?;
    if data.len() != c * h * w {
        return mismatch(format!(
            "{what} data has {} elements, expected {}",
            data.len(),
            c * h * w
        ));
    }
    if let Some(i) = data.iter().position(|v| !v.is_finite()) {
        return invalid(format!("{what} element {i} is not finite"));
    }
    Ok(())
}

impl LatentGrid {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        check_data("latent grid", channels, height, width, &data)?;
        Ok(Self { channels, height, width, data })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Result<Self> {
        Self::filled(channels, height, width, 0.0)
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f64) -> Result<Self> {
        check_dims("latent grid", channels, height, width)?;
        if !value.is_finite() {
            return invalid("fill value must be finite");
        }
        Ok(Self { channels, height, width, data: vec![value; channels * height * width] })
    }

    /// Builds a grid from a per-element function of `(c, y, x)`.
    pub fn from_fn(
        channels: usize,
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Result<Self> {
        check_dims("latent grid", channels, height, width)?;
        let mut data = Vec::with_capacity(channels * height * width);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Self::new(channels, height, width, data)
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// `(channels, height, width)`.
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn spatial(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn index(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.height + y) * self.width + x
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.index(c, y, x)]
    }

    /// Sets one element. Non-finite values are rejected.
    pub fn set(&mut self, c: usize, y: usize, x: usize, value: f64) -> Result<()> {
        if !value.is_finite() {
            return invalid(format!("non-finite value at ({c}, {y}, {x})"));
        }
        let i = self.index(c, y, x);
        self.data[i] = value;
        Ok(())
    }

    /// The channel vector at spatial position `(y, x)`.
    pub fn pixel(&self, y: usize, x: usize) -> Vec<f64> {
        (0..self.channels).map(|c| self.get(c, y, x)).collect()
    }

    pub fn same_shape(&self, other: &LatentGrid) -> bool {
        self.shape() == other.shape()
    }

    pub fn ensure_same_shape(&self, other: &LatentGrid, what: &str) -> Result<()> {
        if !self.same_shape(other) {
            return mismatch(format!("{what}: {:?} vs {:?}", self.shape(), other.shape()));
        }
        Ok(())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<LatentGrid> {
        LatentGrid::new(self.channels, self.height, self.width, self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn zip_map(&self, other: &LatentGrid, f: impl Fn(f64, f64) -> f64) -> Result<LatentGrid> {
        self.ensure_same_shape(other, "elementwise operands")?;
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        LatentGrid::new(self.channels, self.height, self.width, data)
    }

    /// `a * self + b * other`, elementwise.
    pub fn lincomb(&self, a: f64, other: &LatentGrid, b: f64) -> Result<LatentGrid> {
        self.zip_map(other, |x, y| a * x + b * y)
    }

    pub fn max_abs_diff(&self, other: &LatentGrid) -> Result<f64> {
        self.ensure_same_shape(other, "max_abs_diff")?;
        Ok(self.data.iter().zip(&other.data).fold(0.0, |m, (a, b)| m.max((a - b).abs())))
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    /// Per-channel `(min, max)`.
    pub fn channel_bounds(&self) -> Vec<(f64, f64)> {
        let plane = self.height * self.width;
        self.data
            .chunks(plane)
            .map(|ch| {
                ch.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
            })
            .collect()
    }
}

/// Per-position feature vectors of length `dim`, laid out like [`LatentGrid`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureGrid {
    dim: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl FeatureGrid {
    pub fn new(dim: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        check_data("feature grid", dim, height, width, &data)?;
        Ok(Self { dim, height, width, data })
    }

    /// Builds a grid from position-major vectors (`vectors[y * w + x]`).
    pub fn from_vectors(dim: usize, height: usize, width: usize, vectors: &[Vec<f64>]) -> Result<Self> {
        check_dims("feature grid", dim, height, width)?;
        if vectors.len() != height * width {
            return mismatch(format!("{} vectors for a {height}x{width} grid", vectors.len()));
        }
        let plane = height * width;
        let mut data = vec![0.0; dim * plane];
        for (p, v) in vectors.iter().enumerate() {
            if v.len() != dim {
                return mismatch(format!("vector {p} has length {}, expected {dim}", v.len()));
            }
            for (d, &val) in v.iter().enumerate() {
                data[d * plane + p] = val;
            }
        }
        Self::new(dim, height, width, data)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn spatial(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn positions(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, d: usize, y: usize, x: usize) -> f64 {
        self.data[(d * self.height + y) * self.width + x]
    }

    /// Feature vector at flat position `p = y * w + x`.
    pub fn vector_at(&self, p: usize) -> Vec<f64> {
        let plane = self.positions();
        (0..self.dim).map(|d| self.data[d * plane + p]).collect()
    }

    /// All feature vectors, position-major.
    pub fn vectors(&self) -> Vec<Vec<f64>> {
        (0..self.positions()).map(|p| self.vector_at(p)).collect()
    }

    pub fn ensure_same_shape(&self, other: &FeatureGrid, what: &str) -> Result<()> {
        if (self.dim, self.height, self.width) != (other.dim, other.height, other.width) {
            return mismatch(format!(
                "{what}: {}x{}x{} vs {}x{}x{}",
                self.dim, self.height, self.width, other.dim, other.height, other.width
            ));
        }
        Ok(())
    }

    /// Concatenates two grids along the feature axis.
    pub fn concat(&self, other: &FeatureGrid) -> Result<FeatureGrid> {
        if self.spatial() != other.spatial() {
            return mismatch(format!("concat: spatial {:?} vs {:?}", self.spatial(), other.spatial()));
        }
        let mut data = self.data.clone();
        data.extend_from_slice(&other.data);
        FeatureGrid::new(self.dim + other.dim, self.height, self.width, data)
    }

    pub fn scaled(&self, factor: f64) -> Result<FeatureGrid> {
        FeatureGrid::new(self.dim, self.height, self.width, self.data.iter().map(|v| v * factor).collect())
    }
}

impl From<LatentGrid> for FeatureGrid {
    fn from(g: LatentGrid) -> Self {
        FeatureGrid { dim: g.channels, height: g.height, width: g.width, data: g.data }
    }
}

impl From<FeatureGrid> for LatentGrid {
    fn from(f: FeatureGrid) -> Self {
        LatentGrid { channels: f.dim, height: f.height, width: f.width, data: f.data }
    }
}

/// Divides every per-position vector by its Euclidean norm. Zero vectors stay zero.
pub fn l2_normalize_vectors(f: &FeatureGrid) -> FeatureGrid {
    let plane = f.positions();
    let mut data = f.data.clone();
    for p in 0..plane {
        let norm = (0..f.dim).map(|d| f.data[d * plane + p].powi(2)).sum::<f64>().sqrt();
        if norm > 0.0 {
            for d in 0..f.dim {
                data[d * plane + p] /= norm;
            }
        }
    }
    FeatureGrid { dim: f.dim, height: f.height, width: f.width, data }
}

/// A location in latent-pixel units; `(0, 0)` is the centre of the top-left cell.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Position {
    pub y: f64,
    pub x: f64,
}

impl Position {
    pub fn new(y: f64, x: f64) -> Self {
        Self { y, x }
    }

    pub fn squared_distance(&self, other: &Position) -> f64 {
        (self.y - other.y).powi(2) + (self.x - other.x).powi(2)
    }

    pub fn distance(&self, other: &Position) -> f64 {
        self.squared_distance(other).sqrt()
    }

    /// Nearest grid cell, clamped into `height × width`.
    pub fn nearest_cell(&self, height: usize, width: usize) -> (usize, usize) {
        let clamp = |v: f64, n: usize| v.round().clamp(0.0, (n - 1) as f64) as usize;
        (clamp(self.y, height), clamp(self.x, width))
    }
}

/// 8-bit interleaved RGB image, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return invalid(format!("image dimensions must be positive, got {width}x{height}"));
        }
        if data.len() != width * height * 3 {
            return mismatch(format!("image has {} bytes, expected {}", data.len(), width * height * 3));
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Result<Self> {
        let data = rgb.iter().copied().cycle().take(width * height * 3).collect();
        Self::new(width, height, data)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn into_data(self) -> Vec<u8> {
        self.data
    }

    #[inline]
    pub fn pixel(&self, y: usize, x: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn put(&mut self, y: usize, x: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Rec. 601 luma in `[0, 255]`.
    pub fn luma(&self, y: usize, x: usize) -> f64 {
        let [r, g, b] = self.pixel(y, x);
        0.299 * r as f64 + 0.587 * g as f64 + 0.114 * b as f64
    }

    pub fn ensure_same_dims(&self, other: &RgbImage, what: &str) -> Result<()> {
        if (self.width, self.height) != (other.width, other.height) {
            return mismatch(format!(
                "{what}: {}x{} vs {}x{}",
                self.width, self.height, other.width, other.height
            ));
        }
        Ok(())
    }
}
