//! Dense row-major pixel buffers.
//!
//! `ImageBuf` is the storage behind every frame type in this crate: `f64`
//! samples in H×W×C order (channel index varies fastest). All heavier math
//! (networks, warping on the tape) lives in [`crate::tensor`]; this type only
//! covers the elementwise plumbing that radiometry and data generation need.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ImageBuf {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl ImageBuf {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::shape(format!(
                "buffer of {} samples cannot hold {}x{}x{}",
                data.len(),
                height,
                width,
                channels
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![0.0; height * width * channels],
        }
    }

    pub fn splat(height: usize, width: usize, channels: usize, value: f64) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    /// Build from a per-pixel closure `(y, x, c) -> value`.
    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(height * width * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(y, x, c));
                }
            }
        }
        Self {
            height,
            width,
            channels,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, value: f64) {
        self.data[(y * self.width + x) * self.channels + c] = value;
    }

    /// Bilinear sample with clamp-to-edge semantics. `x`/`y` are continuous
    /// pixel coordinates (integer coordinates hit pixel centers).
    pub fn sample_bilinear(&self, y: f64, x: f64, c: usize) -> f64 {
        let xc = x.clamp(0.0, (self.width - 1) as f64);
        let yc = y.clamp(0.0, (self.height - 1) as f64);
        let x0 = xc.floor() as usize;
        let y0 = yc.floor() as usize;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let fx = xc - x0 as f64;
        let fy = yc - y0 as f64;
        let v00 = self.get(y0, x0, c);
        let v01 = self.get(y0, x1, c);
        let v10 = self.get(y1, x0, c);
        let v11 = self.get(y1, x1, c);
        (v00 * (1.0 - fx) + v01 * fx) * (1.0 - fy) + (v10 * (1.0 - fx) + v11 * fx) * fy
    }

    pub fn same_dims(&self, other: &ImageBuf) -> bool {
        self.dims() == other.dims()
    }

    pub fn map(&self, mut f: impl FnMut(f64) -> f64) -> ImageBuf {
        ImageBuf {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &ImageBuf, f: impl Fn(f64, f64) -> f64) -> Result<ImageBuf> {
        if !self.same_dims(other) {
            return Err(Error::shape(format!(
                "zip_map over {:?} and {:?}",
                self.dims(),
                other.dims()
            )));
        }
        Ok(ImageBuf {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: self
                .data
                .iter()
                .zip(other.data.iter())
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn max_abs_diff(&self, other: &ImageBuf) -> f64 {
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Crop a window; the window must lie fully inside the buffer.
    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<ImageBuf> {
        if top + height > self.height || left + width > self.width {
            return Err(Error::invalid(format!(
                "crop {}x{}+{}+{} exceeds image {}x{}",
                width, height, left, top, self.width, self.height
            )));
        }
        let mut data = Vec::with_capacity(height * width * self.channels);
        for y in top..top + height {
            let row = (y * self.width + left) * self.channels;
            data.extend_from_slice(&self.data[row..row + width * self.channels]);
        }
        Ok(ImageBuf {
            height,
            width,
            channels: self.channels,
            data,
        })
    }

    /// Horizontal mirror (flips the x axis).
    pub fn flip_horizontal(&self) -> ImageBuf {
        ImageBuf::from_fn(self.height, self.width, self.channels, |y, x, c| {
            self.get(y, self.width - 1 - x, c)
        })
    }

    /// Vertical mirror (flips the y axis).
    pub fn flip_vertical(&self) -> ImageBuf {
        ImageBuf::from_fn(self.height, self.width, self.channels, |y, x, c| {
            self.get(self.height - 1 - y, x, c)
        })
    }

    /// Rotate 90 degrees clockwise; output is W×H.
    pub fn rotate90(&self) -> ImageBuf {
        ImageBuf::from_fn(self.width, self.height, self.channels, |y, x, c| {
            self.get(self.height - 1 - x, y, c)
        })
    }

    /// Percentile over all samples using the nearest-rank rule, `q` in [0, 1].
    pub fn percentile(&self, q: f64) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        let mut sorted = self.data.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).expect("non-finite sample in percentile"));
        let rank = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
        sorted[rank - 1]
    }
}
