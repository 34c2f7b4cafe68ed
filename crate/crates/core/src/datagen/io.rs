//! Frame file I/O: LDR frames as 8/16-bit PNG with values mapped linearly to
//! [0, 1], HDR frames as float OpenEXR.

use std::path::Path;

use crate::error::{Error, Result};
use crate::raster::ImageBuf;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PngDepth {
    Eight,
    Sixteen,
}

/// Write an LDR buffer (values in [0, 1], 1 or 3 channels) as PNG.
pub fn write_ldr_png(path: &Path, img: &ImageBuf, depth: PngDepth) -> Result<()> {
    let (h, w, c) = img.dims();
    if c != 3 && c != 1 {
        return Err(Error::invalid(format!(
            "PNG writer expects 1 or 3 channels, got {c}"
        )));
    }
    let io_err = |e: String| Error::io(path, e);
    let to_rgb = |y: usize, x: usize, ch: usize| -> f64 {
        let v = if c == 1 {
            img.get(y, x, 0)
        } else {
            img.get(y, x, ch)
        };
        v.clamp(0.0, 1.0)
    };
    match depth {
        PngDepth::Eight => {
            let mut data = Vec::with_capacity(h * w * 3);
            for y in 0..h {
                for x in 0..w {
                    for ch in 0..3 {
                        data.push((to_rgb(y, x, ch) * 255.0).round() as u8);
                    }
                }
            }
            let buf: image::RgbImage = image::ImageBuffer::from_raw(w as u32, h as u32, data)
                .ok_or_else(|| io_err("buffer size mismatch".to_string()))?;
            buf.save(path).map_err(|e| io_err(e.to_string()))
        }
        PngDepth::Sixteen => {
            let mut data = Vec::with_capacity(h * w * 3);
            for y in 0..h {
                for x in 0..w {
                    for ch in 0..3 {
                        data.push((to_rgb(y, x, ch) * 65535.0).round() as u16);
                    }
                }
            }
            let buf: image::ImageBuffer<image::Rgb<u16>, Vec<u16>> =
                image::ImageBuffer::from_raw(w as u32, h as u32, data)
                    .ok_or_else(|| io_err("buffer size mismatch".to_string()))?;
            buf.save(path).map_err(|e| io_err(e.to_string()))
        }
    }
}

/// Read a PNG into a [0, 1] RGB buffer; 8-bit values divide by 255, 16-bit
/// by 65535.
pub fn read_ldr_png(path: &Path) -> Result<ImageBuf> {
    let io_err = |e: String| Error::io(path, e);
    let decoded = image::ImageReader::open(path)
        .map_err(|e| io_err(e.to_string()))?
        .decode()
        .map_err(|e| io_err(e.to_string()))?;
    let (w, h) = (decoded.width() as usize, decoded.height() as usize);
    match decoded {
        image::DynamicImage::ImageRgb16(buf) => Ok(ImageBuf::from_fn(h, w, 3, |y, x, c| {
            buf.get_pixel(x as u32, y as u32).0[c] as f64 / 65535.0
        })),
        image::DynamicImage::ImageLuma16(buf) => Ok(ImageBuf::from_fn(h, w, 3, |y, x, _| {
            buf.get_pixel(x as u32, y as u32).0[0] as f64 / 65535.0
        })),
        image::DynamicImage::ImageRgba16(buf) => Ok(ImageBuf::from_fn(h, w, 3, |y, x, c| {
            buf.get_pixel(x as u32, y as u32).0[c] as f64 / 65535.0
        })),
        other => {
            let rgb = other.to_rgb8();
            Ok(ImageBuf::from_fn(h, w, 3, |y, x, c| {
                rgb.get_pixel(x as u32, y as u32).0[c] as f64 / 255.0
            }))
        }
    }
}

/// Write an HDR buffer as a 32-bit float RGB OpenEXR file.
pub fn write_hdr_exr(path: &Path, img: &ImageBuf) -> Result<()> {
    let (h, w, c) = img.dims();
    if c != 3 && c != 1 {
        return Err(Error::invalid(format!(
            "EXR writer expects 1 or 3 channels, got {c}"
        )));
    }
    exr::prelude::write_rgb_file(path, w, h, |x, y| {
        if c == 1 {
            let v = img.get(y, x, 0) as f32;
            (v, v, v)
        } else {
            (
                img.get(y, x, 0) as f32,
                img.get(y, x, 1) as f32,
                img.get(y, x, 2) as f32,
            )
        }
    })
    .map_err(|e| Error::io(path, e.to_string()))
}

/// Read a float OpenEXR file into an RGB buffer.
pub fn read_hdr_exr(path: &Path) -> Result<ImageBuf> {
    let image = exr::prelude::read_first_rgba_layer_from_file(
        path,
        |resolution, _channels| ImageBuf::zeros(resolution.height(), resolution.width(), 3),
        |buf: &mut ImageBuf, position, (r, g, b, _a): (f32, f32, f32, f32)| {
            buf.set(position.y(), position.x(), 0, r as f64);
            buf.set(position.y(), position.x(), 1, g as f64);
            buf.set(position.y(), position.x(), 2, b as f64);
        },
    )
    .map_err(|e| Error::io(path, e.to_string()))?;
    Ok(image.layer_data.channel_data.pixels)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tempdir() -> std::path::PathBuf {
        let dir = std::env::temp_dir().join(format!(
            "hdrvid-io-{}-{}",
            std::process::id(),
            std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .unwrap()
                .as_nanos()
        ));
        std::fs::create_dir_all(&dir).unwrap();
        dir
    }

    #[test]
    fn exr_round_trip_is_float_exact() {
        let dir = tempdir();
        let path = dir.join("frame.exr");
        let img = ImageBuf::from_fn(6, 5, 3, |y, x, c| {
            (y as f64 * 1.7 + x as f64 * 0.31 + c as f64 * 0.011) * 0.37
        });
        write_hdr_exr(&path, &img).unwrap();
        let back = read_hdr_exr(&path).unwrap();
        assert_eq!(back.dims(), (6, 5, 3));
        // Exact within f32 representation of the stored values.
        for (a, b) in img.data().iter().zip(back.data().iter()) {
            assert!((*a as f32 as f64 - b).abs() < 1e-12, "{a} vs {b}");
        }
        std::fs::remove_dir_all(dir).ok();
    }

    #[test]
    fn png_linear_mapping_at_both_depths() {
        let dir = tempdir();

        let img = ImageBuf::from_fn(2, 2, 3, |y, x, c| ((y * 2 + x + c) % 5) as f64 / 4.0);
        let p8 = dir.join("frame8.png");
        write_ldr_png(&p8, &img, PngDepth::Eight).unwrap();
        let back8 = read_ldr_png(&p8).unwrap();
        assert!(img.max_abs_diff(&back8) <= 0.5 / 255.0 + 1e-9);

        let p16 = dir.join("frame16.png");
        write_ldr_png(&p16, &img, PngDepth::Sixteen).unwrap();
        let back16 = read_ldr_png(&p16).unwrap();
        assert!(img.max_abs_diff(&back16) <= 0.5 / 65535.0 + 1e-12);

        // 255 -> 1.0 and 32768/65535 under the linear mapping.
        let white = ImageBuf::splat(1, 1, 3, 1.0);
        let pw = dir.join("white.png");
        write_ldr_png(&pw, &white, PngDepth::Eight).unwrap();
        assert_eq!(read_ldr_png(&pw).unwrap().get(0, 0, 0), 1.0);

        let mid = ImageBuf::splat(1, 1, 3, 32768.0 / 65535.0);
        let pm = dir.join("mid.png");
        write_ldr_png(&pm, &mid, PngDepth::Sixteen).unwrap();
        assert_eq!(read_ldr_png(&pm).unwrap().get(0, 0, 0), 32768.0 / 65535.0);

        std::fs::remove_dir_all(dir).ok();
    }

    #[test]
    fn unreadable_file_reports_path() {
        let missing = Path::new("/nonexistent/nowhere.png");
        match read_ldr_png(missing) {
            Err(Error::Io { path, .. }) => assert_eq!(path, missing),
            other => panic!("expected io error, got {other:?}"),
        }
    }
}
