//! Floating-point image tensors plus the handful of pixel operations the
//! pipeline needs: binary PGM/PPM I/O, bilinear resize, crop, mirror and
//! separable Gaussian smoothing.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// Row-major, channel-interleaved image with intensities in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl ImageTensor {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::Image(format!(
                "unsupported channel count {channels}"
            )));
        }
        if height == 0 || width == 0 {
            return Err(Error::Image("empty image".into()));
        }
        if data.len() != height * width * channels {
            return Err(Error::Image(format!(
                "{} values for a {height}x{width}x{channels} image",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite() || *v < 0.0 || *v > 1.0) {
            return Err(Error::Image(
                "intensities must be finite and in [0, 1]".into(),
            ));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Result<Self> {
        Self::new(
            height,
            width,
            channels,
            vec![value; height * width * channels],
        )
    }

    /// Builds an image from values that may leave [0, 1]; they are clamped.
    pub fn from_unclamped(
        height: usize,
        width: usize,
        channels: usize,
        mut data: Vec<f64>,
    ) -> Result<Self> {
        data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
        Self::new(height, width, channels, data)
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

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    /// Rec. 601 luma (the single channel for grayscale images).
    pub fn luminance(&self) -> Vec<f64> {
        if self.channels == 1 {
            return self.data.clone();
        }
        self.data
            .chunks_exact(3)
            .map(|p| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2])
            .collect()
    }

    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Self> {
        if height == 0 || width == 0 || top + height > self.height || left + width > self.width {
            return Err(Error::Image(format!(
                "crop {height}x{width}+{top}+{left} outside {}x{} image",
                self.height, self.width
            )));
        }
        let c = self.channels;
        let mut data = Vec::with_capacity(height * width * c);
        for y in top..top + height {
            let start = (y * self.width + left) * c;
            data.extend_from_slice(&self.data[start..start + width * c]);
        }
        Ok(Self {
            height,
            width,
            channels: c,
            data,
        })
    }

    pub fn hflip(&self) -> Self {
        let c = self.channels;
        let mut data = Vec::with_capacity(self.data.len());
        for y in 0..self.height {
            for x in (0..self.width).rev() {
                let start = (y * self.width + x) * c;
                data.extend_from_slice(&self.data[start..start + c]);
            }
        }
        Self { data, ..*self }
    }

    /// Bilinear resampling with pixel-center alignment.
    pub fn resize(&self, height: usize, width: usize) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Image("resize to empty image".into()));
        }
        if height == self.height && width == self.width {
            return Ok(self.clone());
        }
        let c = self.channels;
        let sy = self.height as f64 / height as f64;
        let sx = self.width as f64 / width as f64;
        let sample = |dst: usize, scale: f64, len: usize| {
            let src = ((dst as f64 + 0.5) * scale - 0.5).clamp(0.0, (len - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(len - 1);
            (i0, i1, src - i0 as f64)
        };
        let mut data = Vec::with_capacity(height * width * c);
        for y in 0..height {
            let (y0, y1, fy) = sample(y, sy, self.height);
            for x in 0..width {
                let (x0, x1, fx) = sample(x, sx, self.width);
                for ch in 0..c {
                    let top = self.get(y0, x0, ch) * (1.0 - fx) + self.get(y0, x1, ch) * fx;
                    let bot = self.get(y1, x0, ch) * (1.0 - fx) + self.get(y1, x1, ch) * fx;
                    data.push((top * (1.0 - fy) + bot * fy).clamp(0.0, 1.0));
                }
            }
        }
        Ok(Self {
            height,
            width,
            channels: c,
            data,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        decode_pnm(&bytes).map_err(|msg| Error::Image(format!("{}: {msg}", path.display())))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.encode_pnm()).map_err(|e| Error::io(path, e))
    }

    /// Binary PGM (1 channel) or PPM (3 channels), maxval 255.
    pub fn encode_pnm(&self) -> Vec<u8> {
        let magic = if self.channels == 1 { "P5" } else { "P6" };
        let mut out = format!("{magic}\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.data.iter().map(|v| (v * 255.0).round() as u8));
        out
    }
}

fn decode_pnm(bytes: &[u8]) -> std::result::Result<ImageTensor, String> {
    let mut pos = 0;
    let mut next_token = || -> std::result::Result<String, String> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err("truncated header".into());
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    let channels = match next_token()?.as_str() {
        "P5" => 1,
        "P6" => 3,
        other => return Err(format!("unsupported format {other:?} (need P5 or P6)")),
    };
    let mut number = |what: &str| -> std::result::Result<usize, String> {
        let t = next_token()?;
        t.parse().map_err(|_| format!("bad {what} {t:?}"))
    };
    let width = number("width")?;
    let height = number("height")?;
    let maxval = number("maxval")?;
    if maxval == 0 || maxval > 255 {
        return Err(format!("maxval {maxval} not supported (8-bit only)"));
    }
    // exactly one whitespace byte separates the header from the raster
    let start = pos + 1;
    let len = width * height * channels;
    if bytes.len() < start + len {
        return Err("truncated raster".into());
    }
    let data = bytes[start..start + len]
        .iter()
        .map(|&b| f64::from(b) / 255.0)
        .collect();
    ImageTensor::new(height, width, channels, data).map_err(|e| e.to_string())
}

/// Normalized Gaussian taps for std `sigma`, truncated at 3σ.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return vec![1.0];
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = k.iter().sum();
    k.iter_mut().for_each(|w| *w /= total);
    k
}

/// Separable Gaussian smoothing with edge replication. Values are not
/// clamped, so the operator is linear in its input.
///
/// Each output is accumulated as `x_0 + Σ w_i (x_i - x_0)`, which equals the
/// plain weighted sum for normalized weights and reproduces constant regions
/// bit-exactly.
pub fn gaussian_blur_raw(
    data: &[f64],
    height: usize,
    width: usize,
    channels: usize,
    sigma: f64,
) -> Vec<f64> {
    let kernel = gaussian_kernel(sigma);
    if kernel.len() == 1 {
        return data.to_vec();
    }
    let r = (kernel.len() / 2) as isize;
    let idx = |y: usize, x: usize, c: usize| (y * width + x) * channels + c;
    let pass = |src: &[f64], horizontal: bool| -> Vec<f64> {
        let mut out = vec![0.0; src.len()];
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    let center = src[idx(y, x, c)];
                    let mut acc = 0.0;
                    for (t, w) in kernel.iter().enumerate() {
                        let off = t as isize - r;
                        let v = if horizontal {
                            let xx = (x as isize + off).clamp(0, width as isize - 1) as usize;
                            src[idx(y, xx, c)]
                        } else {
                            let yy = (y as isize + off).clamp(0, height as isize - 1) as usize;
                            src[idx(yy, x, c)]
                        };
                        acc += w * (v - center);
                    }
                    out[idx(y, x, c)] = center + acc;
                }
            }
        }
        out
    };
    let tmp = pass(data, true);
    pass(&tmp, false)
}

pub fn gaussian_blur(img: &ImageTensor, sigma: f64) -> ImageTensor {
    let data = gaussian_blur_raw(&img.data, img.height, img.width, img.channels, sigma);
    ImageTensor::from_unclamped(img.height, img.width, img.channels, data).expect("same shape")
}
