//! In-memory tensors and the `CFXT` interchange format.
//!
//! Layout (little-endian):
//!
//! ```text
//! 0..4    magic "CFXT"
//! 4       version (1)
//! 5       dtype code (1 = f32)
//! 6       ndims
//! 7..     ndims x u32 dims
//! ..      payload, f32 row-major
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"CFXT";
pub const FORMAT_VERSION: u8 = 1;
pub const DTYPE_F32: u8 = 1;
const HEADER_FIXED: usize = 7;

fn check_finite(values: &[f32]) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(index) => Err(Error::NonFinite { index }),
        None => Ok(()),
    }
}

/// A C x H x W image with values already normalized by the dataset statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl ImageTensor {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::DimMismatch(format!(
                "image dims must be nonzero, got {channels}x{height}x{width}"
            )));
        }
        if data.len() != channels * height * width {
            return Err(Error::DimMismatch(format!(
                "image {channels}x{height}x{width} needs {} values, got {}",
                channels * height * width,
                data.len()
            )));
        }
        check_finite(&data)?;
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn num_pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Value at channel `c`, flat pixel index `p`.
    #[inline]
    pub fn at(&self, c: usize, p: usize) -> f32 {
        self.data[c * self.height * self.width + p]
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }
}

/// One attribution score per pixel, channel-aggregated.
#[derive(Debug, Clone, PartialEq)]
pub struct AttributionMap {
    height: usize,
    width: usize,
    scores: Vec<f32>,
}

impl AttributionMap {
    pub fn new(height: usize, width: usize, scores: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::DimMismatch("attribution dims must be nonzero".into()));
        }
        if scores.len() != height * width {
            return Err(Error::DimMismatch(format!(
                "attribution {height}x{width} needs {} scores, got {}",
                height * width,
                scores.len()
            )));
        }
        check_finite(&scores)?;
        Ok(Self {
            height,
            width,
            scores,
        })
    }

    /// Sums per-channel scores into one score per pixel.
    pub fn from_channel_scores(channel_scores: &ImageTensor) -> Self {
        let (c, h, w) = channel_scores.dims();
        let n = h * w;
        let mut scores = vec![0.0f32; n];
        for ch in 0..c {
            for (p, s) in scores.iter_mut().enumerate() {
                *s += channel_scores.at(ch, p);
            }
        }
        Self {
            height: h,
            width: w,
            scores,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn scores(&self) -> &[f32] {
        &self.scores
    }

    pub fn check_matches(&self, image: &ImageTensor) -> Result<()> {
        if self.height != image.height() || self.width != image.width() {
            return Err(Error::DimMismatch(format!(
                "attribution {}x{} does not match image {}x{}",
                self.height,
                self.width,
                image.height(),
                image.width()
            )));
        }
        Ok(())
    }
}

/// Boolean keep-mask over the pixels of an image.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct PixelMask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl PixelMask {
    pub fn new(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != height * width {
            return Err(Error::DimMismatch(format!(
                "mask {height}x{width} needs {} entries, got {}",
                height * width,
                bits.len()
            )));
        }
        Ok(Self {
            height,
            width,
            bits,
        })
    }

    pub fn filled(height: usize, width: usize, value: bool) -> Self {
        Self {
            height,
            width,
            bits: vec![value; height * width],
        }
    }

    pub fn from_pixels(height: usize, width: usize, pixels: &[(usize, usize)]) -> Result<Self> {
        let mut mask = Self::filled(height, width, false);
        for &(r, c) in pixels {
            if r >= height || c >= width {
                return Err(Error::DimMismatch(format!(
                    "pixel ({r},{c}) outside {height}x{width}"
                )));
            }
            mask.bits[r * width + c] = true;
        }
        Ok(mask)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    #[inline]
    pub fn get(&self, p: usize) -> bool {
        self.bits[p]
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    pub fn fraction(&self) -> f64 {
        self.count() as f64 / self.bits.len() as f64
    }

    pub fn is_subset_of(&self, other: &PixelMask) -> bool {
        self.bits.len() == other.bits.len()
            && self.bits.iter().zip(&other.bits).all(|(a, b)| !*a || *b)
    }
}

/// Dimension list and payload as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct RawTensor {
    pub dims: Vec<u32>,
    pub data: Vec<f32>,
}

impl RawTensor {
    pub fn encode(&self) -> Result<Vec<u8>> {
        let ndims = u8::try_from(self.dims.len())
            .map_err(|_| Error::invalid("too many dimensions for CFXT"))?;
        let expected = element_count(&self.dims)
            .ok_or_else(|| Error::DimMismatch("dims product overflows".into()))?;
        if expected != self.data.len() {
            return Err(Error::DimMismatch(format!(
                "dims imply {expected} values, payload has {}",
                self.data.len()
            )));
        }
        check_finite(&self.data)?;
        let mut out = Vec::with_capacity(HEADER_FIXED + 4 * self.dims.len() + 4 * self.data.len());
        out.extend_from_slice(MAGIC);
        out.push(FORMAT_VERSION);
        out.push(DTYPE_F32);
        out.push(ndims);
        for d in &self.dims {
            out.extend_from_slice(&d.to_le_bytes());
        }
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(Error::parse(0, "bad magic"));
        }
        if bytes.len() < HEADER_FIXED {
            return Err(Error::parse(bytes.len(), "header truncated"));
        }
        if bytes[4] != FORMAT_VERSION {
            return Err(Error::parse(4, format!("unsupported version {}", bytes[4])));
        }
        if bytes[5] != DTYPE_F32 {
            return Err(Error::parse(5, format!("unsupported dtype code {}", bytes[5])));
        }
        let ndims = bytes[6] as usize;
        let payload_start = HEADER_FIXED + 4 * ndims;
        if bytes.len() < payload_start {
            return Err(Error::parse(bytes.len(), "dimension list truncated"));
        }
        let dims: Vec<u32> = bytes[HEADER_FIXED..payload_start]
            .chunks_exact(4)
            .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        let count = element_count(&dims)
            .ok_or_else(|| Error::parse(HEADER_FIXED, "dims product overflows"))?;
        let payload = &bytes[payload_start..];
        let needed = count
            .checked_mul(4)
            .ok_or_else(|| Error::parse(HEADER_FIXED, "dims product overflows"))?;
        if payload.len() < needed {
            return Err(Error::parse(
                bytes.len(),
                "payload shorter than dims imply",
            ));
        }
        if payload.len() > needed {
            return Err(Error::parse(payload_start + needed, "trailing bytes after payload"));
        }
        let data: Vec<f32> = payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        check_finite(&data)?;
        Ok(Self { dims, data })
    }
}

fn element_count(dims: &[u32]) -> Option<usize> {
    dims.iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d as usize))
}

/// Types that round-trip through a `CFXT` file.
pub trait TensorFile: Sized {
    fn to_raw(&self) -> RawTensor;
    fn from_raw(raw: RawTensor) -> Result<Self>;
}

impl TensorFile for ImageTensor {
    fn to_raw(&self) -> RawTensor {
        RawTensor {
            dims: vec![self.channels as u32, self.height as u32, self.width as u32],
            data: self.data.clone(),
        }
    }

    fn from_raw(raw: RawTensor) -> Result<Self> {
        match raw.dims[..] {
            [c, h, w] => ImageTensor::new(c as usize, h as usize, w as usize, raw.data),
            [h, w] => ImageTensor::new(1, h as usize, w as usize, raw.data),
            _ => Err(Error::DimMismatch(format!(
                "image tensor needs 2 or 3 dims, got {:?}",
                raw.dims
            ))),
        }
    }
}

impl TensorFile for AttributionMap {
    fn to_raw(&self) -> RawTensor {
        RawTensor {
            dims: vec![self.height as u32, self.width as u32],
            data: self.scores.clone(),
        }
    }

    fn from_raw(raw: RawTensor) -> Result<Self> {
        match raw.dims[..] {
            [h, w] | [1, h, w] => AttributionMap::new(h as usize, w as usize, raw.data),
            _ => Err(Error::DimMismatch(format!(
                "attribution tensor needs dims HxW, got {:?}",
                raw.dims
            ))),
        }
    }
}

impl TensorFile for PixelMask {
    fn to_raw(&self) -> RawTensor {
        RawTensor {
            dims: vec![self.height as u32, self.width as u32],
            data: self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
        }
    }

    fn from_raw(raw: RawTensor) -> Result<Self> {
        let [h, w] = raw.dims[..] else {
            return Err(Error::DimMismatch(format!(
                "mask tensor needs dims HxW, got {:?}",
                raw.dims
            )));
        };
        let bits = raw.data.iter().map(|&v| v != 0.0).collect();
        PixelMask::new(h as usize, w as usize, bits)
    }
}

pub fn write_tensor<T: TensorFile>(t: &T, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = t.to_raw().encode()?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_tensor<T: TensorFile>(path: impl AsRef<Path>) -> Result<T> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    T::from_raw(RawTensor::decode(&bytes)?)
}
