//! Planar float images and patch extraction.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;
use crate::tensor::Matrix;

/// Channel-planar image with values nominally in `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Image {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f32>,
}

#[derive(Debug, thiserror::Error)]
pub enum ImageError {
    #[error("io error reading {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("png decode error in {path}: {message}")]
    Decode { path: String, message: String },
    #[error("unsupported png color type {0}")]
    ColorType(String),
}

impl Image {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self { channels, height, width, pixels: vec![0.0; channels * height * width] }
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.pixels[(c * self.height + y) * self.width + x]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.pixels[(c * self.height + y) * self.width + x] = v;
    }

    /// Non-overlapping `patch × patch` tiles in raster order, each flattened
    /// channel-major into one row.
    pub fn patches<T: Scalar>(&self, patch: usize) -> Matrix<T> {
        let (gh, gw) = (self.height / patch, self.width / patch);
        let dim = self.channels * patch * patch;
        let mut out = Matrix::zeros(gh * gw, dim);
        for py in 0..gh {
            for px in 0..gw {
                let row = out.row_mut(py * gw + px);
                let mut k = 0;
                for c in 0..self.channels {
                    for y in 0..patch {
                        for x in 0..patch {
                            row[k] = T::of(self.get(c, py * patch + y, px * patch + x) as f64);
                            k += 1;
                        }
                    }
                }
            }
        }
        out
    }

    /// Box/nearest resampling to a new geometry.
    pub fn resize(&self, height: usize, width: usize) -> Image {
        let mut out = Image::zeros(self.channels, height, width);
        for c in 0..self.channels {
            for y in 0..height {
                let y0 = y * self.height / height;
                let y1 = ((y + 1) * self.height / height).max(y0 + 1);
                for x in 0..width {
                    let x0 = x * self.width / width;
                    let x1 = ((x + 1) * self.width / width).max(x0 + 1);
                    let mut acc = 0.0;
                    for yy in y0..y1 {
                        for xx in x0..x1 {
                            acc += self.get(c, yy, xx);
                        }
                    }
                    out.set(c, y, x, acc / ((y1 - y0) * (x1 - x0)) as f32);
                }
            }
        }
        out
    }

    pub fn load_png(path: &Path) -> Result<Image, ImageError> {
        let p = path.display().to_string();
        let file = std::fs::File::open(path).map_err(|source| ImageError::Io { path: p.clone(), source })?;
        let mut decoder = png::Decoder::new(std::io::BufReader::new(file));
        decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
        let mut reader = decoder.read_info().map_err(|e| ImageError::Decode { path: p.clone(), message: e.to_string() })?;
        let mut buf = vec![0; reader.output_buffer_size()];
        let info = reader.next_frame(&mut buf).map_err(|e| ImageError::Decode { path: p, message: e.to_string() })?;
        let (w, h) = (info.width as usize, info.height as usize);
        let stride = match info.color_type {
            png::ColorType::Rgb => 3,
            png::ColorType::Rgba => 4,
            png::ColorType::Grayscale => 1,
            png::ColorType::GrayscaleAlpha => 2,
            other => return Err(ImageError::ColorType(format!("{other:?}"))),
        };
        let mut img = Image::zeros(3, h, w);
        for y in 0..h {
            for x in 0..w {
                let base = (y * w + x) * stride;
                for c in 0..3 {
                    let src = if stride >= 3 { base + c } else { base };
                    img.set(c, y, x, buf[src] as f32 / 255.0);
                }
            }
        }
        Ok(img)
    }

    pub fn save_png(&self, path: &Path) -> Result<(), ImageError> {
        let p = path.display().to_string();
        let file = std::fs::File::create(path).map_err(|source| ImageError::Io { path: p.clone(), source })?;
        let mut enc = png::Encoder::new(std::io::BufWriter::new(file), self.width as u32, self.height as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header().map_err(|e| ImageError::Decode { path: p.clone(), message: e.to_string() })?;
        let mut data = Vec::with_capacity(self.width * self.height * 3);
        for y in 0..self.height {
            for x in 0..self.width {
                for c in 0..3 {
                    let v = self.get(c.min(self.channels - 1), y, x);
                    data.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
                }
            }
        }
        writer.write_image_data(&data).map_err(|e| ImageError::Decode { path: p, message: e.to_string() })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn patches_are_raster_ordered() {
        let mut img = Image::zeros(1, 4, 4);
        for y in 0..4 {
            for x in 0..4 {
                img.set(0, y, x, (y * 4 + x) as f32);
            }
        }
        let p = img.patches::<f64>(2);
        assert_eq!(p.shape(), (4, 4));
        assert_eq!(p.row(1), &[2.0, 3.0, 6.0, 7.0]);
        assert_eq!(p.row(2), &[8.0, 9.0, 12.0, 13.0]);
    }

    #[test]
    fn png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut img = Image::zeros(3, 5, 7);
        img.set(1, 2, 3, 1.0);
        let path = dir.path().join("x.png");
        img.save_png(&path).unwrap();
        let back = Image::load_png(&path).unwrap();
        assert_eq!(back, img);
        assert_eq!(back.resize(10, 14).get(1, 4, 6), 1.0);
    }
}
