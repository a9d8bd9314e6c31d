//! Planar float images and their file formats (8-bit PNG, 32-bit PFM).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Channel-planar image: `data[(c·height + y)·width + x]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        Image {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::shape(
                "image",
                format!(
                    "{} values for {}x{}x{}",
                    data.len(),
                    channels,
                    height,
                    width
                ),
            ));
        }
        Ok(Image {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f32) -> Self {
        Image {
            channels,
            height,
            width,
            data: vec![value; channels * height * width],
        }
    }

    pub fn from_fn(
        channels: usize,
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Self {
        let mut img = Image::new(channels, height, width);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    img.data[(c * height + y) * width + x] = f(c, y, x);
                }
            }
        }
        img
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f32] {
        let n = self.height * self.width;
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn same_dims(&self, other: &Image) -> bool {
        (self.channels, self.height, self.width) == (other.channels, other.height, other.width)
    }

    /// Rectangular crop starting at (`y0`, `x0`).
    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<Image> {
        if y0 + h > self.height || x0 + w > self.width {
            return Err(Error::shape(
                "crop",
                format!(
                    "{}x{} at ({}, {}) exceeds {}x{}",
                    h, w, y0, x0, self.height, self.width
                ),
            ));
        }
        Ok(Image::from_fn(self.channels, h, w, |c, y, x| {
            self.get(c, y0 + y, x0 + x)
        }))
    }

    pub fn flip_horizontal(&self) -> Image {
        Image::from_fn(self.channels, self.height, self.width, |c, y, x| {
            self.get(c, y, self.width - 1 - x)
        })
    }

    pub fn flip_vertical(&self) -> Image {
        Image::from_fn(self.channels, self.height, self.width, |c, y, x| {
            self.get(c, self.height - 1 - y, x)
        })
    }

    /// Edge-reflecting pad on the bottom and right (`abcd|cb…`).
    pub fn pad_reflect(&self, h: usize, w: usize) -> Image {
        let reflect = |i: usize, n: usize| {
            if n == 1 {
                return 0;
            }
            let period = 2 * (n - 1);
            let m = i % period;
            if m < n {
                m
            } else {
                period - m
            }
        };
        Image::from_fn(self.channels, h, w, |c, y, x| {
            self.get(c, reflect(y, self.height), reflect(x, self.width))
        })
    }

    pub fn max_abs_diff(&self, other: &Image) -> f32 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len().max(1) as f64
    }

    /// 1×C×H×W tensor.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        let data = self.data.iter().map(|&v| T::of(v as f64)).collect();
        Tensor::from_vec(&[1, self.channels, self.height, self.width], data).expect("dims match")
    }

    /// Batch item `n` of an N×C×H×W tensor.
    pub fn from_tensor<T: Scalar>(t: &Tensor<T>, n: usize) -> Result<Image> {
        let (nb, c, h, w) = t.nchw()?;
        if n >= nb {
            return Err(Error::shape(
                "image",
                format!("batch index {} of {}", n, nb),
            ));
        }
        let len = c * h * w;
        let data = t.data()[n * len..(n + 1) * len]
            .iter()
            .map(|v| v.as_f64() as f32)
            .collect();
        Image::from_vec(c, h, w, data)
    }

    /// Quantises to 8 bits; values are treated as linear and clamped to [0, 1].
    pub fn to_u8(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.data.len());
        for y in 0..self.height {
            for x in 0..self.width {
                for c in 0..self.channels {
                    out.push((self.get(c, y, x).clamp(0.0, 1.0) * 255.0).round() as u8);
                }
            }
        }
        out
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let color = match self.channels {
            1 => png::ColorType::Grayscale,
            3 => png::ColorType::Rgb,
            c => {
                return Err(Error::format(
                    "png",
                    path,
                    format!("cannot encode {} channels", c),
                ))
            }
        };
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut enc =
            png::Encoder::new(BufWriter::new(file), self.width as u32, self.height as u32);
        enc.set_color(color);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc
            .write_header()
            .map_err(|e| Error::format("png", path, e.to_string()))?;
        writer
            .write_image_data(&self.to_u8())
            .map_err(|e| Error::format("png", path, e.to_string()))?;
        writer
            .finish()
            .map_err(|e| Error::format("png", path, e.to_string()))
    }

    pub fn load_png(path: &Path) -> Result<Image> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut dec = png::Decoder::new(BufReader::new(file));
        dec.set_transformations(png::Transformations::normalize_to_color8());
        let bad = |e: png::DecodingError| Error::format("png", path, e.to_string());
        let mut reader = dec.read_info().map_err(bad)?;
        let size = reader
            .output_buffer_size()
            .ok_or_else(|| Error::format("png", path, "image too large"))?;
        let mut buf = vec![0; size];
        let info = reader.next_frame(&mut buf).map_err(bad)?;
        let channels = match info.color_type {
            png::ColorType::Grayscale => 1,
            png::ColorType::Rgb => 3,
            other => {
                return Err(Error::format(
                    "png",
                    path,
                    format!("unsupported color type {:?}", other),
                ))
            }
        };
        let (h, w) = (info.height as usize, info.width as usize);
        let mut img = Image::new(channels, h, w);
        for y in 0..h {
            let row = &buf[y * info.line_size..];
            for x in 0..w {
                for c in 0..channels {
                    img.set(c, y, x, row[x * channels + c] as f32 / 255.0);
                }
            }
        }
        Ok(img)
    }

    /// Little-endian PFM (negative scale), rows stored bottom to top.
    pub fn save_pfm(&self, path: &Path) -> Result<()> {
        let tag = match self.channels {
            1 => "Pf",
            3 => "PF",
            c => {
                return Err(Error::format(
                    "pfm",
                    path,
                    format!("cannot encode {} channels", c),
                ))
            }
        };
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = BufWriter::new(file);
        let mut bytes = format!("{}\n{} {}\n-1.0\n", tag, self.width, self.height).into_bytes();
        bytes.reserve(self.data.len() * 4);
        for y in (0..self.height).rev() {
            for x in 0..self.width {
                for c in 0..self.channels {
                    bytes.extend_from_slice(&self.get(c, y, x).to_le_bytes());
                }
            }
        }
        out.write_all(&bytes)
            .and_then(|_| out.flush())
            .map_err(|e| Error::io(path, e))
    }

    pub fn load_pfm(path: &Path) -> Result<Image> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(file);
        let bad = |d: &str| Error::format("pfm", path, d.to_string());
        let mut token = || -> Result<String> {
            let mut s = Vec::new();
            loop {
                let mut b = [0u8];
                if r.read(&mut b).map_err(|e| Error::io(path, e))? == 0 {
                    break;
                }
                if b[0].is_ascii_whitespace() {
                    if s.is_empty() {
                        continue;
                    }
                    break;
                }
                s.push(b[0]);
            }
            String::from_utf8(s).map_err(|_| bad("non-ascii header"))
        };
        let channels = match token()?.as_str() {
            "PF" => 3,
            "Pf" => 1,
            _ => return Err(bad("missing PF/Pf tag")),
        };
        let w: usize = token()?.parse().map_err(|_| bad("bad width"))?;
        let h: usize = token()?.parse().map_err(|_| bad("bad height"))?;
        let scale: f32 = token()?.parse().map_err(|_| bad("bad scale"))?;
        if scale == 0.0 || !scale.is_finite() {
            return Err(bad("scale must be nonzero"));
        }
        let little = scale < 0.0;
        let mut raw = Vec::new();
        r.read_to_end(&mut raw).map_err(|e| Error::io(path, e))?;
        let need = w * h * channels * 4;
        if raw.len() != need {
            return Err(bad(&format!(
                "expected {} data bytes, found {}",
                need,
                raw.len()
            )));
        }
        let mut img = Image::new(channels, h, w);
        let mut it = raw.chunks_exact(4);
        for y in (0..h).rev() {
            for x in 0..w {
                for c in 0..channels {
                    let b: [u8; 4] = it
                        .next()
                        .expect("length checked")
                        .try_into()
                        .expect("4 bytes");
                    let v = if little {
                        f32::from_le_bytes(b)
                    } else {
                        f32::from_be_bytes(b)
                    };
                    img.set(c, y, x, v);
                }
            }
        }
        Ok(img)
    }
}
