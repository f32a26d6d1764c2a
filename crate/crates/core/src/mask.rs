//! Pixel grids: binary masks and soft coverage masks.

use crate::error::{Error, Result};

/// Row-major `{0,1}` mask with isotropic pixel spacing in millimetres.
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryMask {
    width: usize,
    height: usize,
    data: Vec<u8>,
    spacing_mm: f64,
}

impl BinaryMask {
    pub fn new(width: usize, height: usize, data: Vec<u8>, spacing_mm: f64) -> Result<Self> {
        Error::check_len(width * height, data.len())?;
        check_spacing(spacing_mm)?;
        let data = data.into_iter().map(|v| u8::from(v != 0)).collect();
        Ok(Self {
            width,
            height,
            data,
            spacing_mm,
        })
    }

    pub fn zeros(width: usize, height: usize, spacing_mm: f64) -> Self {
        Self {
            width,
            height,
            data: vec![0; width * height],
            spacing_mm: if spacing_mm > 0.0 { spacing_mm } else { 1.0 },
        }
    }

    pub fn from_fn(
        width: usize,
        height: usize,
        spacing_mm: f64,
        f: impl Fn(usize, usize) -> bool,
    ) -> Self {
        let mut m = Self::zeros(width, height, spacing_mm);
        for r in 0..height {
            for c in 0..width {
                m.data[r * width + c] = u8::from(f(c, r));
            }
        }
        m
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn spacing_mm(&self) -> f64 {
        self.spacing_mm
    }

    pub fn with_spacing(mut self, spacing_mm: f64) -> Result<Self> {
        check_spacing(spacing_mm)?;
        self.spacing_mm = spacing_mm;
        Ok(self)
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, col: usize, row: usize) -> bool {
        self.data[row * self.width + col] != 0
    }

    /// Out-of-bounds reads are background.
    pub fn get_signed(&self, col: isize, row: isize) -> bool {
        col >= 0
            && row >= 0
            && (col as usize) < self.width
            && (row as usize) < self.height
            && self.get(col as usize, row as usize)
    }

    pub fn set(&mut self, col: usize, row: usize, v: bool) {
        self.data[row * self.width + col] = u8::from(v);
    }

    pub fn count(&self) -> usize {
        self.data.iter().map(|&v| v as usize).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.data.iter().all(|&v| v == 0)
    }

    pub fn to_raster(&self) -> RasterMask {
        RasterMask {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| f64::from(v)).collect(),
            spacing_mm: self.spacing_mm,
        }
    }

    pub fn same_shape(&self, w: usize, h: usize) -> Result<()> {
        Error::check_len(self.width * self.height, w * h)?;
        if self.width != w {
            return Err(Error::DimensionMismatch {
                expected: self.width,
                got: w,
            });
        }
        Ok(())
    }
}

/// Row-major coverage values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RasterMask {
    width: usize,
    height: usize,
    data: Vec<f64>,
    spacing_mm: f64,
}

impl RasterMask {
    pub fn new(width: usize, height: usize, data: Vec<f64>, spacing_mm: f64) -> Result<Self> {
        Error::check_len(width * height, data.len())?;
        check_spacing(spacing_mm)?;
        if data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::param("data", "coverage values must lie in [0, 1]"));
        }
        Ok(Self {
            width,
            height,
            data,
            spacing_mm,
        })
    }

    pub(crate) fn from_parts(width: usize, height: usize, data: Vec<f64>, spacing_mm: f64) -> Self {
        debug_assert_eq!(width * height, data.len());
        Self {
            width,
            height,
            data,
            spacing_mm,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn spacing_mm(&self) -> f64 {
        self.spacing_mm
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, col: usize, row: usize) -> f64 {
        self.data[row * self.width + col]
    }

    /// Foreground where coverage `>= level`.
    pub fn threshold(&self, level: f64) -> BinaryMask {
        BinaryMask {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| u8::from(v >= level)).collect(),
            spacing_mm: self.spacing_mm,
        }
    }

    /// Fraction of pixels below `eps` or above `1 - eps`.
    pub fn binary_fraction(&self, eps: f64) -> f64 {
        let n = self
            .data
            .iter()
            .filter(|&&v| v < eps || v > 1.0 - eps)
            .count();
        n as f64 / self.data.len().max(1) as f64
    }
}

fn check_spacing(spacing_mm: f64) -> Result<()> {
    if spacing_mm.is_finite() && spacing_mm > 0.0 {
        Ok(())
    } else {
        Err(Error::param("spacing_mm", "must be positive and finite"))
    }
}

/// Row-major grayscale image with intensities nominally in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        Error::check_len(width * height, data.len())?;
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::param("image", "non-finite intensity"));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, col: usize, row: usize) -> f64 {
        self.data[row * self.width + col]
    }

    pub fn set(&mut self, col: usize, row: usize, v: f64) {
        self.data[row * self.width + col] = v;
    }

    /// Bilinear sample at a continuous pixel coordinate (pixel centres at
    /// `+0.5`); outside the image reads as 0.
    pub fn sample_bilinear(&self, x: f64, y: f64) -> f64 {
        let fx = x - 0.5;
        let fy = y - 0.5;
        let x0 = fx.floor();
        let y0 = fy.floor();
        let ax = fx - x0;
        let ay = fy - y0;
        let px = |c: f64, r: f64| -> f64 {
            if c < 0.0 || r < 0.0 || c >= self.width as f64 || r >= self.height as f64 {
                0.0
            } else {
                self.get(c as usize, r as usize)
            }
        };
        (1.0 - ay) * ((1.0 - ax) * px(x0, y0) + ax * px(x0 + 1.0, y0))
            + ay * ((1.0 - ax) * px(x0, y0 + 1.0) + ax * px(x0 + 1.0, y0 + 1.0))
    }

    /// Average pooling by an integer factor; trailing partial blocks are dropped.
    pub fn downsample(&self, factor: usize) -> Image {
        let f = factor.max(1);
        let (w, h) = (self.width / f, self.height / f);
        let mut out = Image::zeros(w, h);
        let norm = 1.0 / (f * f) as f64;
        for r in 0..h {
            for c in 0..w {
                let mut s = 0.0;
                for dr in 0..f {
                    for dc in 0..f {
                        s += self.get(c * f + dc, r * f + dr);
                    }
                }
                out.set(c, r, s * norm);
            }
        }
        out
    }
}
