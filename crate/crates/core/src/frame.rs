//! 8-bit raster frames and portable graymap/pixmap I/O.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::region::BoundingBox;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Luma weights used for grayscale conversion.
pub const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

/// An 8-bit raster, 1 (gray) or 3 (RGB) interleaved channels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<u8>,
}

impl Frame {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::input("frame must be non-empty"));
        }
        if channels != 1 && channels != 3 {
            return Err(Error::input(format!(
                "unsupported channel count {channels}"
            )));
        }
        if data.len() != width * height * channels {
            return Err(Error::input(format!(
                "frame {width}×{height}×{channels} needs {} bytes, got {}",
                width * height * channels,
                data.len()
            )));
        }
        Ok(Frame {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn gray(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        Self::new(width, height, 1, data)
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: u8) -> Result<Self> {
        Self::new(
            width,
            height,
            channels,
            vec![value; width * height * channels],
        )
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    /// Channel values of pixel `(x, y)`.
    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> &[u8] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    pub fn bounds(&self) -> BoundingBox {
        BoundingBox::full(self.width, self.height)
    }

    /// Intensities in `[0, 1]`, row-major.
    pub fn grayscale(&self) -> Vec<f64> {
        match self.channels {
            1 => self.data.iter().map(|&v| v as f64 / 255.0).collect(),
            _ => self
                .data
                .chunks_exact(3)
                .map(|p| {
                    (LUMA[0] * p[0] as f64 + LUMA[1] * p[1] as f64 + LUMA[2] * p[2] as f64) / 255.0
                })
                .collect(),
        }
    }

    /// C×H×W tensor with values scaled to `[0, 1]`.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        let (c, h, w) = (self.channels, self.height, self.width);
        let mut out = vec![T::zero(); c * h * w];
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    out[(ch * h + y) * w + x] =
                        T::of(self.data[(y * w + x) * c + ch] as f64 / 255.0);
                }
            }
        }
        Tensor::from_vec(&[c, h, w], out).expect("frame dimensions are positive")
    }

    /// Pixels inside `region`, which must lie within the frame.
    pub fn crop(&self, region: &BoundingBox) -> Result<Frame> {
        if !self.bounds().contains(region) {
            return Err(Error::input(format!("crop {region} outside frame")));
        }
        let (x0, y0) = (region.x_min as usize, region.y_min as usize);
        let (w, h) = (region.width() as usize, region.height() as usize);
        let mut data = Vec::with_capacity(w * h * self.channels);
        for y in y0..y0 + h {
            let start = (y * self.width + x0) * self.channels;
            data.extend_from_slice(&self.data[start..start + w * self.channels]);
        }
        Frame::new(w, h, self.channels, data)
    }

    /// Binary PGM (P5) for gray frames, PPM (P6) for RGB.
    pub fn to_pnm(&self) -> Vec<u8> {
        let magic = if self.channels == 1 { "P5" } else { "P6" };
        let mut out = format!("{magic}\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.data);
        out
    }

    pub fn from_pnm(bytes: &[u8], location: &str) -> Result<Frame> {
        let mut pos = 0;
        let mut fields = Vec::with_capacity(4);
        while fields.len() < 4 {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(Error::parse(location, "truncated header"));
            }
            fields.push(
                std::str::from_utf8(&bytes[start..pos])
                    .unwrap_or("")
                    .to_string(),
            );
        }
        // exactly one whitespace byte separates the header from the raster
        pos += 1;
        let channels = match fields[0].as_str() {
            "P5" => 1,
            "P6" => 3,
            other => {
                return Err(Error::parse(
                    location,
                    format!("unsupported magic {other:?}"),
                ))
            }
        };
        let num = |s: &str, what: &str| -> Result<usize> {
            s.parse()
                .map_err(|_| Error::parse(location, format!("bad {what} {s:?}")))
        };
        let width = num(&fields[1], "width")?;
        let height = num(&fields[2], "height")?;
        if num(&fields[3], "maxval")? != 255 {
            return Err(Error::parse(location, "only maxval 255 is supported"));
        }
        let need = width * height * channels;
        if bytes.len() < pos + need {
            return Err(Error::parse(location, "truncated raster"));
        }
        Frame::new(width, height, channels, bytes[pos..pos + need].to_vec())
            .map_err(|e| Error::parse(location, e.to_string()))
    }

    pub fn write_pnm(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_pnm())?;
        Ok(())
    }

    pub fn read_pnm(path: &Path) -> Result<Frame> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        Frame::from_pnm(&fs::read(path)?, &path.display().to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pnm_round_trip() {
        let f = Frame::gray(3, 2, vec![0, 10, 20, 30, 40, 255]).unwrap();
        assert_eq!(Frame::from_pnm(&f.to_pnm(), "mem").unwrap(), f);
        let rgb = Frame::new(2, 1, 3, vec![1, 2, 3, 4, 5, 6]).unwrap();
        assert_eq!(Frame::from_pnm(&rgb.to_pnm(), "mem").unwrap(), rgb);
    }

    #[test]
    fn pnm_rejects_garbage() {
        assert!(matches!(
            Frame::from_pnm(b"P2\n1 1\n255\n0", "x"),
            Err(Error::Parse { .. })
        ));
        assert!(Frame::from_pnm(b"P5\n4 4\n255\n\x00", "x").is_err());
    }

    #[test]
    fn tensor_layout_is_chw() {
        let rgb = Frame::new(2, 1, 3, vec![255, 0, 0, 0, 255, 0]).unwrap();
        let t = rgb.to_tensor::<f64>();
        assert_eq!(t.shape(), &[3, 1, 2]);
        assert_eq!(t.data(), &[1.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
        let g = rgb.grayscale();
        assert!((g[0] - 0.299).abs() < 1e-12);
        assert!((g[1] - 0.587).abs() < 1e-12);
    }

    #[test]
    fn crop_extracts_region() {
        let f = Frame::gray(3, 3, (0..9).collect()).unwrap();
        let c = f.crop(&BoundingBox::new(1, 1, 3, 3).unwrap()).unwrap();
        assert_eq!(c.data(), &[4, 5, 7, 8]);
    }
}
