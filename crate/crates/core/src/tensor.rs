//! Dense f64 tensors in channel-first layout.
//!
//! The networks run entirely in 64-bit so analytic gradients can be checked
//! against central finite differences at tight tolerances. Shapes are small
//! (desk scale), so a flat `Vec<f64>` with explicit indexing is all we need.

use crate::raster::ImageBuf;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "tensor shape {:?} does not match {} elements",
            shape,
            data.len()
        );
        Self { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    /// Index into a [C, H, W] tensor.
    #[inline]
    pub fn at3(&self, c: usize, y: usize, x: usize) -> f64 {
        let (h, w) = (self.shape[1], self.shape[2]);
        debug_assert!(c < self.shape[0] && y < h && x < w);
        self.data[(c * h + y) * w + x]
    }

    #[inline]
    pub fn set3(&mut self, c: usize, y: usize, x: usize, v: f64) {
        let (h, w) = (self.shape[1], self.shape[2]);
        self.data[(c * h + y) * w + x] = v;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.shape, other.shape, "add_assign shape mismatch");
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += b;
        }
    }

    pub fn scale_in_place(&mut self, k: f64) {
        for v in &mut self.data {
            *v *= k;
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Convert an H×W×C image buffer into a [C, H, W] tensor.
    pub fn from_image(img: &ImageBuf) -> Self {
        let (h, w, c) = img.dims();
        let mut data = vec![0.0; h * w * c];
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    data[(ch * h + y) * w + x] = img.get(y, x, ch);
                }
            }
        }
        Self {
            shape: vec![c, h, w],
            data,
        }
    }

    /// Convert a [C, H, W] tensor back to an H×W×C image buffer.
    pub fn to_image(&self) -> ImageBuf {
        assert_eq!(self.shape.len(), 3, "to_image needs a [C, H, W] tensor");
        let (c, h, w) = (self.shape[0], self.shape[1], self.shape[2]);
        ImageBuf::from_fn(h, w, c, |y, x, ch| self.at3(ch, y, x))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn image_round_trip() {
        let img = ImageBuf::from_fn(3, 4, 2, |y, x, c| (y * 100 + x * 10 + c) as f64);
        let t = Tensor::from_image(&img);
        assert_eq!(t.shape(), &[2, 3, 4]);
        assert_eq!(t.at3(1, 2, 3), 231.0);
        assert_eq!(t.to_image(), img);
    }
}
