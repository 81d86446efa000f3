use crate::error::{Error, Result};

/// Row-major 2-D array.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid<T> {
    height: usize,
    width: usize,
    data: Vec<T>,
}

impl<T: Copy> Grid<T> {
    pub fn new(height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Shape(format!(
                "grid {height}x{width} needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: T) -> Self {
        Self { height, width, data: vec![value; height * width] }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                data.push(f(r, c));
            }
        }
        Self { height, width, data }
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

    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.width + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: T) {
        self.data[r * self.width + c] = v;
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn map<U: Copy>(&self, f: impl Fn(T) -> U) -> Grid<U> {
        Grid { height: self.height, width: self.width, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn flip_horizontal(&self) -> Self {
        Self::from_fn(self.height, self.width, |r, c| self.get(r, self.width - 1 - c))
    }

    pub fn flip_vertical(&self) -> Self {
        Self::from_fn(self.height, self.width, |r, c| self.get(self.height - 1 - r, c))
    }
}

/// Binary map with values in {0, 1}.
pub type BinaryMask = Grid<u8>;

/// Interleaved `H×W×3` RGB image with channel values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RgbImage {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl RgbImage {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * 3 {
            return Err(Error::Shape(format!(
                "rgb image {height}x{width} needs {} values, got {}",
                height * width * 3,
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidValue(format!("image value {v} outside [0, 1]")));
        }
        Ok(Self { height, width, data })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self { height, width, data: vec![0.0; height * width * 3] }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn pixel(&self, r: usize, c: usize) -> [f32; 3] {
        let i = (r * self.width + c) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, r: usize, c: usize, px: [f32; 3]) {
        let i = (r * self.width + c) * 3;
        self.data[i..i + 3].copy_from_slice(&px);
    }

    fn remap(&self, f: impl Fn(usize, usize) -> (usize, usize)) -> Self {
        let mut out = Self::zeros(self.height, self.width);
        for r in 0..self.height {
            for c in 0..self.width {
                let (sr, sc) = f(r, c);
                out.set_pixel(r, c, self.pixel(sr, sc));
            }
        }
        out
    }

    pub fn flip_horizontal(&self) -> Self {
        self.remap(|r, c| (r, self.width - 1 - c))
    }

    pub fn flip_vertical(&self) -> Self {
        self.remap(|r, c| (self.height - 1 - r, c))
    }

    /// Planar `3×H×W` copy, optionally normalized per channel.
    pub fn to_planar(&self, mean: [f32; 3], std: [f32; 3]) -> Vec<f32> {
        let hw = self.height * self.width;
        let mut out = vec![0.0; 3 * hw];
        for (i, px) in self.data.chunks_exact(3).enumerate() {
            for ch in 0..3 {
                out[ch * hw + i] = (px[ch] - mean[ch]) / std[ch];
            }
        }
        out
    }
}
