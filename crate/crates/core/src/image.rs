//! Dense float images in `[0, 1]`, stored row-major with interleaved channels.

use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("buffer of length {len} does not match {height}x{width}x{channels}")]
    BadBuffer {
        len: usize,
        height: usize,
        width: usize,
        channels: usize,
    },
    #[error("unsupported channel count {0} (expected 1 or 3)")]
    Channels(usize),
    #[error("failed to read or write {path}: {source}")]
    Codec {
        path: String,
        #[source]
        source: image::ImageError,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
}

/// Output of the structure smoother; same layout as any other image.
pub type StructureImage = Image;

impl Image {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self::filled(height, width, channels, 0.0)
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f32) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    pub fn from_vec(
        height: usize,
        width: usize,
        channels: usize,
        data: Vec<f32>,
    ) -> Result<Self, ImageError> {
        if data.len() != height * width * channels {
            return Err(ImageError::BadBuffer {
                len: data.len(),
                height,
                width,
                channels,
            });
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        f: impl Fn(usize, usize, usize) -> f32,
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

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f32) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    /// One channel as a planar `f64` buffer (row-major).
    pub fn plane(&self, c: usize) -> Vec<f64> {
        self.data
            .iter()
            .skip(c)
            .step_by(self.channels)
            .map(|&v| v as f64)
            .collect()
    }

    /// Builds an image from planar channels.
    pub fn from_planes(height: usize, width: usize, planes: &[Vec<f64>]) -> Self {
        let channels = planes.len();
        let mut data = vec![0.0f32; height * width * channels];
        for (c, plane) in planes.iter().enumerate() {
            for (i, &v) in plane.iter().enumerate() {
                data[i * channels + c] = v as f32;
            }
        }
        Self {
            height,
            width,
            channels,
            data,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Self {
            data: self.data.iter().map(|&v| f(v)).collect(),
            ..*self
        }
    }

    pub fn clamp01(&self) -> Self {
        self.map(|v| v.clamp(0.0, 1.0))
    }

    /// Snaps every value onto the 8-bit grid `k / 255`.
    pub fn quantize_8bit(&self) -> Self {
        self.map(|v| to_u8(v) as f32 / 255.0)
    }

    pub fn flip_horizontal(&self) -> Self {
        Self::from_fn(self.height, self.width, self.channels, |y, x, c| {
            self.get(y, self.width - 1 - x, c)
        })
    }

    pub fn translate(&self, dx: isize, dy: isize, fill: f32) -> Self {
        Self::from_fn(self.height, self.width, self.channels, |y, x, c| {
            let sy = y as isize - dy;
            let sx = x as isize - dx;
            if sy < 0 || sx < 0 || sy >= self.height as isize || sx >= self.width as isize {
                fill
            } else {
                self.get(sy as usize, sx as usize, c)
            }
        })
    }

    pub fn mean(&self) -> f64 {
        crate::exec::compensated_sum(self.data.iter().map(|&v| v as f64)) / self.data.len() as f64
    }

    /// Raw 8-bit bytes (HWC), values clamped and rounded.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.data.iter().map(|&v| to_u8(v)).collect()
    }

    pub fn from_bytes(
        height: usize,
        width: usize,
        channels: usize,
        bytes: &[u8],
    ) -> Result<Self, ImageError> {
        Self::from_vec(
            height,
            width,
            channels,
            bytes.iter().map(|&b| b as f32 / 255.0).collect(),
        )
    }

    /// Loads an 8-bit PNG (or any format the decoder knows). Grayscale files
    /// stay single-channel; everything else becomes RGB.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ImageError> {
        let path = path.as_ref();
        let dynimg = image::open(path).map_err(|source| ImageError::Codec {
            path: path.display().to_string(),
            source,
        })?;
        let img = match dynimg.color().channel_count() {
            1 | 2 => {
                let g = dynimg.to_luma8();
                Self::from_bytes(g.height() as usize, g.width() as usize, 1, g.as_raw())?
            }
            _ => {
                let rgb = dynimg.to_rgb8();
                Self::from_bytes(rgb.height() as usize, rgb.width() as usize, 3, rgb.as_raw())?
            }
        };
        Ok(img)
    }

    /// Writes an 8-bit PNG, clamping to `[0, 1]`.
    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<(), ImageError> {
        let path = path.as_ref();
        let color = match self.channels {
            1 => image::ExtendedColorType::L8,
            3 => image::ExtendedColorType::Rgb8,
            c => return Err(ImageError::Channels(c)),
        };
        image::save_buffer_with_format(
            path,
            &self.to_bytes(),
            self.width as u32,
            self.height as u32,
            color,
            image::ImageFormat::Png,
        )
        .map_err(|source| ImageError::Codec {
            path: path.display().to_string(),
            source,
        })
    }
}

#[inline]
fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip_is_exact_on_8bit_grid() {
        let img = Image::from_fn(5, 7, 3, |y, x, c| {
            ((y * 31 + x * 7 + c * 50) % 256) as f32 / 255.0
        });
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.png");
        img.save_png(&p).unwrap();
        let back = Image::load(&p).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn planes_round_trip() {
        let img = Image::from_fn(3, 4, 3, |y, x, c| (y + x + c) as f32 * 0.1);
        let planes: Vec<_> = (0..3).map(|c| img.plane(c)).collect();
        let back = Image::from_planes(3, 4, &planes);
        for (a, b) in img.data().iter().zip(back.data()) {
            assert!((a - b).abs() < 1e-7);
        }
    }

    #[test]
    fn bad_buffer_rejected() {
        assert!(Image::from_vec(2, 2, 3, vec![0.0; 11]).is_err());
    }
}
