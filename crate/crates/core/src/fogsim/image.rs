use std::fs;
use std::path::Path;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const CHANNELS: usize = 3;

/// RGB image with channel-last pixels in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f64>,
}

/// Per-pixel non-negative scene depth.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthMap {
    pub height: usize,
    pub width: usize,
    pub depth: Vec<f64>,
}

impl Image {
    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Image {
            height,
            width,
            pixels: vec![value; height * width * CHANNELS],
        }
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.pixels[(y * self.width + x) * CHANNELS + c]
    }

    pub fn dims(&self) -> [usize; 2] {
        [self.height, self.width]
    }

    /// Pixels as a `[height*width, 3]` token matrix.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.height * self.width, CHANNELS], self.pixels.clone())
            .expect("image buffer matches its dims")
    }

    /// Binary PPM (P6, 8-bit).
    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(
            self.pixels
                .iter()
                .map(|&p| (p.clamp(0.0, 1.0) * 255.0).round() as u8),
        );
        out
    }

    pub fn from_ppm(bytes: &[u8]) -> std::result::Result<Self, String> {
        let mut fields = Vec::with_capacity(4);
        let mut at = 0;
        while fields.len() < 4 {
            while at < bytes.len() && bytes[at].is_ascii_whitespace() {
                at += 1;
            }
            if at < bytes.len() && bytes[at] == b'#' {
                while at < bytes.len() && bytes[at] != b'\n' {
                    at += 1;
                }
                continue;
            }
            let start = at;
            while at < bytes.len() && !bytes[at].is_ascii_whitespace() {
                at += 1;
            }
            if start == at {
                return Err("truncated PPM header".into());
            }
            fields.push(String::from_utf8_lossy(&bytes[start..at]).into_owned());
        }
        at += 1;
        if fields[0] != "P6" {
            return Err(format!("unsupported magic {:?}", fields[0]));
        }
        let parse = |s: &str| s.parse::<usize>().map_err(|e| format!("bad header field {s:?}: {e}"));
        let (width, height, maxval) = (parse(&fields[1])?, parse(&fields[2])?, parse(&fields[3])?);
        if maxval != 255 {
            return Err(format!("only 8-bit PPM is supported, maxval {maxval}"));
        }
        let body = bytes.get(at..).unwrap_or_default();
        let expected = width * height * CHANNELS;
        if body.len() != expected {
            return Err(format!("expected {expected} pixel bytes, found {}", body.len()));
        }
        Ok(Image {
            height,
            width,
            pixels: body.iter().map(|&b| f64::from(b) / 255.0).collect(),
        })
    }

    pub fn save_ppm(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_ppm()).map_err(|e| Error::io(path, e))
    }

    pub fn load_ppm(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Image::from_ppm(&bytes).map_err(|reason| Error::Format {
            path: path.to_path_buf(),
            reason,
        })
    }
}

impl DepthMap {
    pub fn uniform(height: usize, width: usize, depth: f64) -> Self {
        DepthMap {
            height,
            width,
            depth: vec![depth; height * width],
        }
    }

    pub fn dims(&self) -> [usize; 2] {
        [self.height, self.width]
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.height, self.width], self.depth.clone()).expect("depth dims")
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        match *t.shape() {
            [height, width] => Ok(DepthMap {
                height,
                width,
                depth: t.data().to_vec(),
            }),
            _ => Err(Error::shape("depth map", t.shape(), &[0, 0])),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_tensor().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_tensor(&Tensor::load(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_round_trip_is_exact_on_8bit_values() {
        let img = Image {
            height: 2,
            width: 3,
            pixels: (0..18).map(|i| f64::from(i * 13) / 255.0).collect(),
        };
        let bytes = img.to_ppm();
        assert!(bytes.starts_with(b"P6\n3 2\n255\n"));
        let back = Image::from_ppm(&bytes).unwrap();
        assert_eq!(back.to_ppm(), bytes);
        assert!(back.pixels.iter().zip(&img.pixels).all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn ppm_rejects_short_body() {
        let mut bytes = Image::filled(2, 2, 0.5).to_ppm();
        bytes.pop();
        assert!(Image::from_ppm(&bytes).is_err());
        assert!(Image::from_ppm(b"P3\n1 1\n255\n").is_err());
    }
}
