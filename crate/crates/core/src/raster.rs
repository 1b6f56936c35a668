//! Single-channel floating point rasters.
//!
//! Pixel `(row, col)` has its center at continuous coordinate `(x = col, y = row)`.

use std::path::Path;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub struct ImageDims {
    pub width: usize,
    pub height: usize,
}

impl ImageDims {
    pub fn new(width: usize, height: usize) -> Self {
        Self { width, height }
    }

    pub fn len(&self) -> usize {
        self.width * self.height
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= 0.0 && y >= 0.0 && x <= (self.width - 1) as f64 && y <= (self.height - 1) as f64
    }

    pub fn is_multiple_of(&self, k: usize) -> bool {
        self.width % k == 0 && self.height % k == 0
    }
}

/// Out-of-bounds policy for resampling.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Border {
    /// Mirror about the edge pixel (`-1 -> 1`, `w -> w - 2`).
    #[default]
    Reflect,
    Zero,
}

/// Reflect an index into `[0, n)` without repeating the edge sample.
pub fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let n = n as isize;
    let period = 2 * (n - 1);
    let mut m = i.rem_euclid(period);
    if m >= n {
        m = period - m;
    }
    m as usize
}

#[derive(Clone, Debug, PartialEq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self::filled(width, height, 0.0)
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::ShapeMismatch(format!(
                "{} values for a {}x{} image",
                data.len(),
                height,
                width
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for r in 0..height {
            for c in 0..width {
                data.push(f(r, c));
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> ImageDims {
        ImageDims::new(self.width, self.height)
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: f64) {
        self.data[row * self.width + col] = value;
    }

    #[inline]
    fn fetch(&self, row: isize, col: isize, border: Border) -> f64 {
        match border {
            Border::Reflect => self.get(
                reflect_index(row, self.height),
                reflect_index(col, self.width),
            ),
            Border::Zero => {
                if row < 0 || col < 0 || row >= self.height as isize || col >= self.width as isize
                {
                    0.0
                } else {
                    self.get(row as usize, col as usize)
                }
            }
        }
    }

    /// Bilinear sample at continuous `(x, y)`.
    pub fn sample_bilinear(&self, x: f64, y: f64, border: Border) -> f64 {
        let x0 = x.floor();
        let y0 = y.floor();
        let fx = x - x0;
        let fy = y - y0;
        let (c0, r0) = (x0 as isize, y0 as isize);
        let p00 = self.fetch(r0, c0, border);
        let p01 = self.fetch(r0, c0 + 1, border);
        let p10 = self.fetch(r0 + 1, c0, border);
        let p11 = self.fetch(r0 + 1, c0 + 1, border);
        (1.0 - fy) * ((1.0 - fx) * p00 + fx * p01) + fy * ((1.0 - fx) * p10 + fx * p11)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn max_value(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    /// Crop `width x height` starting at `(col, row)`.
    pub fn crop(&self, col: usize, row: usize, width: usize, height: usize) -> Result<Self> {
        if col + width > self.width || row + height > self.height {
            return Err(Error::ShapeMismatch(format!(
                "crop {}x{}+{}+{} outside {}x{}",
                height, width, row, col, self.height, self.width
            )));
        }
        Ok(Self::from_fn(width, height, |r, c| self.get(row + r, col + c)))
    }

    /// Pad on the bottom and right by reflection until both dims are multiples of `k`.
    pub fn pad_to_multiple(&self, k: usize) -> Self {
        let w = self.width.div_ceil(k) * k;
        let h = self.height.div_ceil(k) * k;
        if w == self.width && h == self.height {
            return self.clone();
        }
        Self::from_fn(w, h, |r, c| {
            self.get(
                reflect_index(r as isize, self.height),
                reflect_index(c as isize, self.width),
            )
        })
    }

    /// Separable Gaussian blur with reflected borders.
    pub fn gaussian_blur(&self, sigma: f64) -> Self {
        if sigma <= 0.0 {
            return self.clone();
        }
        let kernel = gaussian_kernel(sigma);
        let radius = (kernel.len() / 2) as isize;
        let tmp = Self::from_fn(self.width, self.height, |r, c| {
            kernel
                .iter()
                .enumerate()
                .map(|(i, k)| k * self.fetch(r as isize, c as isize + i as isize - radius, Border::Reflect))
                .sum()
        });
        Self::from_fn(self.width, self.height, |r, c| {
            kernel
                .iter()
                .enumerate()
                .map(|(i, k)| k * tmp.fetch(r as isize + i as isize - radius, c as isize, Border::Reflect))
                .sum()
        })
    }

    /// Sobel derivatives `(d/dx, d/dy)`, reflected borders.
    pub fn sobel(&self) -> (Self, Self) {
        let p = |r: usize, c: usize, dr: isize, dc: isize| {
            self.fetch(r as isize + dr, c as isize + dc, Border::Reflect)
        };
        let gx = Self::from_fn(self.width, self.height, |r, c| {
            (p(r, c, -1, 1) + 2.0 * p(r, c, 0, 1) + p(r, c, 1, 1))
                - (p(r, c, -1, -1) + 2.0 * p(r, c, 0, -1) + p(r, c, 1, -1))
        });
        let gy = Self::from_fn(self.width, self.height, |r, c| {
            (p(r, c, 1, -1) + 2.0 * p(r, c, 1, 0) + p(r, c, 1, 1))
                - (p(r, c, -1, -1) + 2.0 * p(r, c, -1, 0) + p(r, c, -1, 1))
        });
        (gx, gy)
    }

    /// Load a grayscale PNG scaled to `[0, 1]`. 16-bit inputs keep full precision;
    /// color inputs are converted by luminance.
    pub fn load_png(path: &Path) -> Result<Self> {
        let img = ::image::open(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?;
        let luma = img.into_luma16();
        let (w, h) = luma.dimensions();
        let data = luma
            .into_raw()
            .into_iter()
            .map(|v| v as f64 / u16::MAX as f64)
            .collect();
        Self::from_vec(w as usize, h as usize, data)
    }

    /// Save as 8-bit PNG, clamping to `[0, 1]`.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let buf = ::image::GrayImage::from_raw(
            self.width as u32,
            self.height as u32,
            self.data.iter().map(|&v| to_u8(v)).collect(),
        )
        .expect("buffer matches dims");
        buf.save(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
    }

    /// Save as 16-bit PNG, clamping to `[0, 1]`.
    pub fn save_png16(&self, path: &Path) -> Result<()> {
        let buf: ::image::ImageBuffer<::image::Luma<u16>, Vec<u16>> = ::image::ImageBuffer::from_raw(
            self.width as u32,
            self.height as u32,
            self.data
                .iter()
                .map(|&v| (v.clamp(0.0, 1.0) * u16::MAX as f64).round() as u16)
                .collect(),
        )
        .expect("buffer matches dims");
        buf.save(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
    }
}

pub(crate) fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Normalized Gaussian kernel with radius `ceil(3 sigma)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil().max(1.0) as isize;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}
