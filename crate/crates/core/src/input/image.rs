//! 8-bit RGB images, binary PPM I/O and bilinear resizing.

use std::path::Path;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawImage {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl RawImage {
    /// Interleaved RGB, row-major.
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Input(format!("degenerate image {width}x{height}")));
        }
        if data.len() != width * height * 3 {
            return Err(Error::Input(format!(
                "image {width}x{height} needs {} bytes, got {}",
                width * height * 3,
                data.len()
            )));
        }
        Ok(RawImage { width, height, data })
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Result<Self> {
        let data = rgb.iter().copied().cycle().take(width * height * 3).collect();
        Self::new(width, height, data)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Bilinear resampling with half-pixel centers and edge clamping.
    pub fn resize(&self, width: usize, height: usize) -> Result<RawImage> {
        if width == 0 || height == 0 {
            return Err(Error::Input(format!("cannot resize to {width}x{height}")));
        }
        if width == self.width && height == self.height {
            return Ok(self.clone());
        }
        let taps = |out: usize, src: usize| -> Vec<(usize, usize, f64)> {
            let scale = src as f64 / out as f64;
            (0..out)
                .map(|o| {
                    let pos = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
                    let lo = pos.floor() as usize;
                    let hi = (lo + 1).min(src - 1);
                    (lo, hi, pos - lo as f64)
                })
                .collect()
        };
        let xs = taps(width, self.width);
        let ys = taps(height, self.height);
        let mut data = Vec::with_capacity(width * height * 3);
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                let (a, b) = (self.pixel(x0, y0), self.pixel(x1, y0));
                let (c, d) = (self.pixel(x0, y1), self.pixel(x1, y1));
                for ch in 0..3 {
                    let top = a[ch] as f64 * (1.0 - fx) + b[ch] as f64 * fx;
                    let bottom = c[ch] as f64 * (1.0 - fx) + d[ch] as f64 * fx;
                    let v = top * (1.0 - fy) + bottom * fy;
                    data.push(v.round().clamp(0.0, 255.0) as u8);
                }
            }
        }
        RawImage::new(width, height, data)
    }

    /// Copies the `size`×`size` square whose top-left corner is (x, y).
    pub fn crop(&self, x: usize, y: usize, size: usize) -> Result<RawImage> {
        if x + size > self.width || y + size > self.height {
            return Err(Error::Input(format!(
                "crop {size} at ({x},{y}) outside {}x{}",
                self.width, self.height
            )));
        }
        let mut data = Vec::with_capacity(size * size * 3);
        for row in y..y + size {
            let start = (row * self.width + x) * 3;
            data.extend_from_slice(&self.data[start..start + size * 3]);
        }
        RawImage::new(size, size, data)
    }

    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.data);
        out
    }

    pub fn from_ppm(bytes: &[u8]) -> Result<RawImage> {
        let mut pos = 0;
        let mut fields = Vec::with_capacity(4);
        while fields.len() < 4 {
            while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
                if bytes[pos] == b'#' {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                } else {
                    pos += 1;
                }
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(Error::Input("truncated PPM header".into()));
            }
            fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
        }
        if fields[0] != "P6" {
            return Err(Error::Input(format!("unsupported PPM magic {:?}", fields[0])));
        }
        let num = |s: &str| -> Result<usize> {
            s.parse()
                .map_err(|_| Error::Input(format!("bad PPM header field {s:?}")))
        };
        let (w, h, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
        if maxval != 255 {
            return Err(Error::Input(format!("only 8-bit PPM supported, maxval {maxval}")));
        }
        // exactly one whitespace byte separates the header from the raster
        pos += 1;
        let need = w * h * 3;
        if bytes.len() < pos + need {
            return Err(Error::Input(format!(
                "PPM raster truncated: need {need} bytes, have {}",
                bytes.len().saturating_sub(pos)
            )));
        }
        RawImage::new(w, h, bytes[pos..pos + need].to_vec())
    }

    pub fn read_ppm(path: &Path) -> Result<RawImage> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_ppm(&bytes)
    }

    pub fn write_ppm(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_ppm()).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rejects_degenerate_images() {
        assert!(matches!(RawImage::new(0, 4, vec![]), Err(Error::Input(_))));
        assert!(matches!(RawImage::new(2, 2, vec![0; 11]), Err(Error::Input(_))));
    }

    #[test]
    fn resize_constant_image_stays_constant() {
        let img = RawImage::filled(7, 3, [10, 200, 33]).unwrap();
        let r = img.resize(16, 9).unwrap();
        assert!(r.data().chunks(3).all(|p| p == [10, 200, 33]));
    }

    #[test]
    fn resize_upsample_two_pixels() {
        // 2x1 -> 4x1: centers map to -0.25, 0.25, 0.75, 1.25 -> clamp to [0, 1]
        let img = RawImage::new(2, 1, vec![0, 0, 0, 100, 100, 100]).unwrap();
        let r = img.resize(4, 1).unwrap();
        let reds: Vec<u8> = r.data().chunks(3).map(|p| p[0]).collect();
        assert_eq!(reds, vec![0, 25, 75, 100]);
    }

    #[test]
    fn ppm_with_comment() {
        let bytes = b"P6\n# made by hand\n1 1\n255\n\x01\x02\x03";
        let img = RawImage::from_ppm(bytes).unwrap();
        assert_eq!(img.pixel(0, 0), [1, 2, 3]);
        assert!(RawImage::from_ppm(b"P3\n1 1\n255\n").is_err());
        assert!(RawImage::from_ppm(b"P6\n2 2\n255\n\x00").is_err());
    }

    proptest! {
        #[test]
        fn ppm_round_trip(w in 1usize..9, h in 1usize..9, seed in any::<u64>()) {
            let data: Vec<u8> = (0..w * h * 3).map(|i| (seed.wrapping_mul(i as u64 + 1) >> 7) as u8).collect();
            let img = RawImage::new(w, h, data).unwrap();
            prop_assert_eq!(RawImage::from_ppm(&img.to_ppm()).unwrap(), img);
        }
    }
}
