//! Raster images and the Netpbm family of file formats.
//!
//! Label images are binary P5 (8-bit), photometric images binary P6 and
//! disparity maps grayscale PFM (`Pf`). PFM stores rows bottom-to-top and
//! signals byte order through the sign of the scale field (negative =
//! little-endian); [`write_pfm`] always emits little-endian.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// Row-major raster of `P` pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct Image<P> {
    width: usize,
    height: usize,
    pixels: Vec<P>,
}

pub type LabelImage = Image<u8>;
pub type RgbImage = Image<[u8; 3]>;
pub type DisparityImage = Image<f32>;

impl<P: Copy> Image<P> {
    pub fn new(width: usize, height: usize, fill: P) -> Self {
        Self {
            width,
            height,
            pixels: vec![fill; width * height],
        }
    }

    pub fn from_vec(width: usize, height: usize, pixels: Vec<P>) -> Result<Self> {
        if pixels.len() != width * height {
            return Err(Error::DimensionMismatch(format!(
                "{} pixels for {width}x{height} image",
                pixels.len()
            )));
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> P) -> Self {
        let mut pixels = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                pixels.push(f(x, y));
            }
        }
        Self {
            width,
            height,
            pixels,
        }
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> P {
        self.pixels[y * self.width + x]
    }

    /// Pixel access with edge replication outside the raster.
    #[inline]
    pub fn get_clamped(&self, x: isize, y: isize) -> P {
        let x = x.clamp(0, self.width as isize - 1) as usize;
        let y = y.clamp(0, self.height as isize - 1) as usize;
        self.get(x, y)
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, p: P) {
        self.pixels[y * self.width + x] = p;
    }

    pub fn pixels(&self) -> &[P] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [P] {
        &mut self.pixels
    }

    pub fn into_pixels(self) -> Vec<P> {
        self.pixels
    }

    pub fn row(&self, y: usize) -> &[P] {
        &self.pixels[y * self.width..(y + 1) * self.width]
    }

    pub fn same_size<Q>(&self, other: &Image<Q>) -> bool {
        self.width == other.width && self.height == other.height
    }
}

/// Pixel types that can be blended for bilinear resampling.
pub trait Interpolate: Copy {
    fn bilinear(p00: Self, p10: Self, p01: Self, p11: Self, fx: f64, fy: f64) -> Self;
}

#[inline]
fn lerp2(a: f64, b: f64, c: f64, d: f64, fx: f64, fy: f64) -> f64 {
    let top = a + (b - a) * fx;
    let bottom = c + (d - c) * fx;
    top + (bottom - top) * fy
}

impl Interpolate for f32 {
    fn bilinear(p00: f32, p10: f32, p01: f32, p11: f32, fx: f64, fy: f64) -> f32 {
        lerp2(p00 as f64, p10 as f64, p01 as f64, p11 as f64, fx, fy) as f32
    }
}

impl Interpolate for u8 {
    fn bilinear(p00: u8, p10: u8, p01: u8, p11: u8, fx: f64, fy: f64) -> u8 {
        lerp2(p00 as f64, p10 as f64, p01 as f64, p11 as f64, fx, fy)
            .round()
            .clamp(0.0, 255.0) as u8
    }
}

impl Interpolate for [u8; 3] {
    fn bilinear(p00: Self, p10: Self, p01: Self, p11: Self, fx: f64, fy: f64) -> Self {
        std::array::from_fn(|c| u8::bilinear(p00[c], p10[c], p01[c], p11[c], fx, fy))
    }
}

/// How to sample between pixel centers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Sampling {
    Nearest,
    Bilinear,
}

impl<P: Copy> Image<P> {
    /// Nearest-neighbour sample at continuous pixel coordinates (pixel
    /// centers on integers), edge-replicated.
    #[inline]
    pub fn sample_nearest(&self, x: f64, y: f64) -> P {
        self.get_clamped(x.round() as isize, y.round() as isize)
    }
}

impl<P: Interpolate> Image<P> {
    /// Bilinear sample at continuous pixel coordinates, edge-replicated.
    pub fn sample_bilinear(&self, x: f64, y: f64) -> P {
        let x0 = x.floor();
        let y0 = y.floor();
        let fx = x - x0;
        let fy = y - y0;
        let (xi, yi) = (x0 as isize, y0 as isize);
        P::bilinear(
            self.get_clamped(xi, yi),
            self.get_clamped(xi + 1, yi),
            self.get_clamped(xi, yi + 1),
            self.get_clamped(xi + 1, yi + 1),
            fx,
            fy,
        )
    }

    pub fn sample(&self, x: f64, y: f64, mode: Sampling) -> P {
        match mode {
            Sampling::Nearest => self.sample_nearest(x, y),
            Sampling::Bilinear => self.sample_bilinear(x, y),
        }
    }
}

impl RgbImage {
    /// Box-filter downsample by an integer factor.
    pub fn downsample(&self, factor: usize) -> Result<RgbImage> {
        if factor == 0 || self.width % factor != 0 || self.height % factor != 0 {
            return Err(Error::DimensionMismatch(format!(
                "{}x{} not divisible by {factor}",
                self.width, self.height
            )));
        }
        let (w, h) = (self.width / factor, self.height / factor);
        let n = (factor * factor) as u32;
        Ok(Image::from_fn(w, h, |x, y| {
            let mut acc = [0u32; 3];
            for dy in 0..factor {
                for p in &self.row(y * factor + dy)[x * factor..(x + 1) * factor] {
                    for c in 0..3 {
                        acc[c] += p[c] as u32;
                    }
                }
            }
            std::array::from_fn(|c| ((acc[c] + n / 2) / n) as u8)
        }))
    }
}

struct HeaderReader<'a> {
    bytes: &'a [u8],
    pos: usize,
    format: &'static str,
}

impl<'a> HeaderReader<'a> {
    fn malformed(&self, reason: impl Into<String>) -> Error {
        Error::Malformed {
            format: self.format,
            reason: reason.into(),
        }
    }

    fn skip_space_and_comments(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                c if c.is_ascii_whitespace() => self.pos += 1,
                _ => break,
            }
        }
    }

    fn token(&mut self) -> Result<&'a str> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.pos < self.bytes.len() && !self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(self.malformed("truncated header"));
        }
        std::str::from_utf8(&self.bytes[start..self.pos]).map_err(|_| self.malformed("non-ascii header"))
    }

    fn number<T: std::str::FromStr>(&mut self, what: &str) -> Result<T> {
        let tok = self.token()?;
        tok.parse()
            .map_err(|_| self.malformed(format!("bad {what} {tok:?}")))
    }

    /// Consume the single whitespace byte separating header and raster.
    fn end_header(&mut self) -> Result<&'a [u8]> {
        match self.bytes.get(self.pos) {
            Some(c) if c.is_ascii_whitespace() => Ok(&self.bytes[self.pos + 1..]),
            _ => Err(self.malformed("missing raster separator")),
        }
    }
}

fn parse_pnm<'a>(bytes: &'a [u8], magic: &str, format: &'static str) -> Result<(usize, usize, &'a [u8])> {
    let mut r = HeaderReader {
        bytes,
        pos: 0,
        format,
    };
    let m = r.token()?;
    if m != magic {
        return Err(r.malformed(format!("magic {m:?}, expected {magic}")));
    }
    let width: usize = r.number("width")?;
    let height: usize = r.number("height")?;
    let maxval: u32 = r.number("maxval")?;
    if width == 0 || height == 0 {
        return Err(r.malformed("zero dimension"));
    }
    if maxval == 0 || maxval > 255 {
        return Err(r.malformed(format!("unsupported maxval {maxval}")));
    }
    Ok((width, height, r.end_header()?))
}

pub fn decode_pgm(bytes: &[u8]) -> Result<LabelImage> {
    let (w, h, raster) = parse_pnm(bytes, "P5", "PGM")?;
    if raster.len() < w * h {
        return Err(Error::Malformed {
            format: "PGM",
            reason: format!("raster has {} bytes, need {}", raster.len(), w * h),
        });
    }
    Image::from_vec(w, h, raster[..w * h].to_vec())
}

pub fn encode_pgm(img: &LabelImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.pixels);
    out
}

pub fn decode_ppm(bytes: &[u8]) -> Result<RgbImage> {
    let (w, h, raster) = parse_pnm(bytes, "P6", "PPM")?;
    if raster.len() < 3 * w * h {
        return Err(Error::Malformed {
            format: "PPM",
            reason: format!("raster has {} bytes, need {}", raster.len(), 3 * w * h),
        });
    }
    let pixels = raster[..3 * w * h]
        .chunks_exact(3)
        .map(|c| [c[0], c[1], c[2]])
        .collect();
    Image::from_vec(w, h, pixels)
}

pub fn encode_ppm(img: &RgbImage) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.reserve(img.pixels.len() * 3);
    for p in &img.pixels {
        out.extend_from_slice(p);
    }
    out
}

pub fn decode_pfm(bytes: &[u8]) -> Result<DisparityImage> {
    let mut r = HeaderReader {
        bytes,
        pos: 0,
        format: "PFM",
    };
    let m = r.token()?;
    if m != "Pf" {
        return Err(r.malformed(format!("magic {m:?}, expected grayscale Pf")));
    }
    let width: usize = r.number("width")?;
    let height: usize = r.number("height")?;
    let scale: f64 = r.number("scale")?;
    if width == 0 || height == 0 || scale == 0.0 || !scale.is_finite() {
        return Err(r.malformed("bad dimensions or scale"));
    }
    let raster = r.end_header()?;
    if raster.len() < 4 * width * height {
        return Err(r.malformed(format!(
            "raster has {} bytes, need {}",
            raster.len(),
            4 * width * height
        )));
    }
    let little = scale < 0.0;
    let mut pixels = vec![0f32; width * height];
    for (k, chunk) in raster[..4 * width * height].chunks_exact(4).enumerate() {
        let b = [chunk[0], chunk[1], chunk[2], chunk[3]];
        let v = if little {
            f32::from_le_bytes(b)
        } else {
            f32::from_be_bytes(b)
        };
        // file rows run bottom-to-top
        let (x, file_row) = (k % width, k / width);
        pixels[(height - 1 - file_row) * width + x] = v;
    }
    Image::from_vec(width, height, pixels)
}

pub fn encode_pfm(img: &DisparityImage) -> Vec<u8> {
    let mut out = format!("Pf\n{} {}\n-1.0\n", img.width, img.height).into_bytes();
    out.reserve(img.pixels.len() * 4);
    for y in (0..img.height).rev() {
        for v in img.row(y) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub(crate) fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_pgm(path: impl AsRef<Path>) -> Result<LabelImage> {
    decode_pgm(&read_bytes(path.as_ref())?)
}

pub fn write_pgm(img: &LabelImage, path: impl AsRef<Path>) -> Result<()> {
    write_bytes(path.as_ref(), &encode_pgm(img))
}

pub fn read_ppm(path: impl AsRef<Path>) -> Result<RgbImage> {
    decode_ppm(&read_bytes(path.as_ref())?)
}

pub fn write_ppm(img: &RgbImage, path: impl AsRef<Path>) -> Result<()> {
    write_bytes(path.as_ref(), &encode_ppm(img))
}

pub fn read_pfm(path: impl AsRef<Path>) -> Result<DisparityImage> {
    decode_pfm(&read_bytes(path.as_ref())?)
}

pub fn write_pfm(img: &DisparityImage, path: impl AsRef<Path>) -> Result<()> {
    write_bytes(path.as_ref(), &encode_pfm(img))
}
