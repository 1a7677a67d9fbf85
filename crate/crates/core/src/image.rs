//! Image and gradient-map containers plus 8-bit file I/O.
//!
//! Pixels are stored planar (channel-major, then row-major) as `f32`
//! intensities in `[0, 1]`. Quantization to 8 bits happens only at the file
//! boundary.

use std::path::Path;

use image::{DynamicImage, GrayImage, RgbImage};

use crate::error::{Error, Result};

/// Rec. 601 luma weights for R, G, B.
pub const LUMA_WEIGHTS: [f32; 3] = [0.299, 0.587, 0.114];

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
}

impl Image {
    /// Builds an image from planar data, checking every invariant.
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::arg(format!("image must be non-empty, got {height}x{width}")));
        }
        if channels != 1 && channels != 3 {
            return Err(Error::arg(format!("image must have 1 or 3 channels, got {channels}")));
        }
        if data.len() != height * width * channels {
            return Err(Error::arg(format!(
                "image data has {} elements, expected {}",
                data.len(),
                height * width * channels
            )));
        }
        if let Some(bad) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::arg(format!("image intensity {bad} outside [0, 1]")));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    /// Builds an image from arbitrary planar data, clamping into `[0, 1]`.
    /// NaN maps to 0.
    pub fn from_clamped(height: usize, width: usize, channels: usize, mut data: Vec<f32>) -> Result<Self> {
        for v in &mut data {
            *v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
        }
        Self::new(height, width, channels, data)
    }

    pub fn constant(height: usize, width: usize, channels: usize, value: f32) -> Result<Self> {
        Self::new(height, width, channels, vec![value; height * width * channels])
    }

    /// `f(channel, row, col)` evaluated at every element, clamped to `[0, 1]`.
    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width * channels);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Self::from_clamped(height, width, channels, data)
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

    pub fn pixel_count(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn plane(&self, channel: usize) -> &[f32] {
        let n = self.pixel_count();
        &self.data[channel * n..(channel + 1) * n]
    }

    pub fn get(&self, channel: usize, row: usize, col: usize) -> f32 {
        self.data[(channel * self.height + row) * self.width + col]
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.height == other.height && self.width == other.width && self.channels == other.channels
    }

    /// Elementwise map; the result is clamped back into `[0, 1]`.
    pub fn map(&self, f: impl Fn(f32) -> f32) -> Image {
        let data = self.data.iter().map(|&v| f(v)).collect();
        Image::from_clamped(self.height, self.width, self.channels, data).expect("shape preserved")
    }

    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Image> {
        let data = crop_planes(&self.data, self.channels, self.height, self.width, top, left, height, width)?;
        Ok(Image {
            height,
            width,
            channels: self.channels,
            data,
        })
    }

    pub fn flip_horizontal(&self) -> Image {
        Image {
            data: flip_planes(&self.data, self.channels, self.height, self.width),
            ..*self
        }
    }

    /// Reflect-pads (mirror without repeating the edge sample).
    pub fn pad_reflect(&self, top: usize, bottom: usize, left: usize, right: usize) -> Image {
        let (height, width) = (self.height + top + bottom, self.width + left + right);
        let data = pad_planes(&self.data, self.channels, self.height, self.width, top, left, height, width);
        Image {
            height,
            width,
            channels: self.channels,
            data,
        }
    }

    /// Expands a single-channel image to three identical channels.
    pub fn to_rgb(&self) -> Image {
        if self.channels == 3 {
            return self.clone();
        }
        Image {
            data: self.data.repeat(3),
            channels: 3,
            ..*self
        }
    }
}

/// Signed single-channel LoG response map.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientMap {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl GradientMap {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != height * width {
            return Err(Error::arg(format!(
                "gradient map {height}x{width} does not match {} elements",
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0.0; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.data[row * self.width + col]
    }

    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<GradientMap> {
        let data = crop_planes(&self.data, 1, self.height, self.width, top, left, height, width)?;
        Ok(GradientMap { height, width, data })
    }

    pub fn flip_horizontal(&self) -> GradientMap {
        GradientMap {
            data: flip_planes(&self.data, 1, self.height, self.width),
            ..*self
        }
    }

    pub fn pad_reflect(&self, top: usize, bottom: usize, left: usize, right: usize) -> GradientMap {
        let (height, width) = (self.height + top + bottom, self.width + left + right);
        let data = pad_planes(&self.data, 1, self.height, self.width, top, left, height, width);
        GradientMap { height, width, data }
    }

    /// Display mapping `(x + 16) / 32`, for visual inspection only.
    pub fn to_display(&self) -> Image {
        let data = self.data.iter().map(|v| (v + 16.0) / 32.0).collect();
        Image::from_clamped(self.height, self.width, 1, data).expect("shape preserved")
    }
}

#[allow(clippy::too_many_arguments)]
fn crop_planes(
    data: &[f32],
    channels: usize,
    src_h: usize,
    src_w: usize,
    top: usize,
    left: usize,
    height: usize,
    width: usize,
) -> Result<Vec<f32>> {
    if height == 0 || width == 0 || top + height > src_h || left + width > src_w {
        return Err(Error::arg(format!(
            "crop {height}x{width} at ({top}, {left}) exceeds {src_h}x{src_w}"
        )));
    }
    let mut out = Vec::with_capacity(channels * height * width);
    for c in 0..channels {
        for y in top..top + height {
            let row = (c * src_h + y) * src_w;
            out.extend_from_slice(&data[row + left..row + left + width]);
        }
    }
    Ok(out)
}

fn flip_planes(data: &[f32], channels: usize, height: usize, width: usize) -> Vec<f32> {
    let mut out = data.to_vec();
    for row in out.chunks_exact_mut(width).take(channels * height) {
        row.reverse();
    }
    out
}

/// Mirror index into `[0, n)` for any signed offset.
pub(crate) fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut m = i.rem_euclid(period);
    if m >= n as isize {
        m = period - m;
    }
    m as usize
}

#[allow(clippy::too_many_arguments)]
fn pad_planes(
    data: &[f32],
    channels: usize,
    src_h: usize,
    src_w: usize,
    top: usize,
    left: usize,
    height: usize,
    width: usize,
) -> Vec<f32> {
    let mut out = Vec::with_capacity(channels * height * width);
    for c in 0..channels {
        for y in 0..height {
            let sy = reflect_index(y as isize - top as isize, src_h);
            let row = (c * src_h + sy) * src_w;
            for x in 0..width {
                let sx = reflect_index(x as isize - left as isize, src_w);
                out.push(data[row + sx]);
            }
        }
    }
    out
}

/// Loads an 8-bit grayscale or RGB raster; alpha is discarded.
pub fn load_image(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_image(&bytes).map_err(|e| match e {
        Error::Format { message, .. } => Error::Format {
            path: path.to_path_buf(),
            message,
        },
        other => other,
    })
}

/// Decodes PNG or JPEG bytes.
pub fn decode_image(bytes: &[u8]) -> Result<Image> {
    let decoded = image::load_from_memory(bytes).map_err(|e| Error::Format {
        path: "<memory>".into(),
        message: e.to_string(),
    })?;
    let gray = matches!(
        decoded,
        DynamicImage::ImageLuma8(_) | DynamicImage::ImageLumaA8(_) | DynamicImage::ImageLuma16(_) | DynamicImage::ImageLumaA16(_)
    );
    if gray {
        let buf = decoded.to_luma8();
        let (w, h) = buf.dimensions();
        let data = buf.as_raw().iter().map(|&b| b as f32 / 255.0).collect();
        Image::new(h as usize, w as usize, 1, data)
    } else {
        let buf = decoded.to_rgb8();
        let (w, h) = buf.dimensions();
        let n = (w * h) as usize;
        let mut data = vec![0.0f32; 3 * n];
        for (i, px) in buf.pixels().enumerate() {
            for c in 0..3 {
                data[c * n + i] = px.0[c] as f32 / 255.0;
            }
        }
        Image::new(h as usize, w as usize, 3, data)
    }
}

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Encodes as an 8-bit PNG.
pub fn encode_png(img: &Image) -> Result<Vec<u8>> {
    let (w, h) = (img.width as u32, img.height as u32);
    let dynamic = if img.channels == 1 {
        let bytes = img.data.iter().map(|&v| quantize(v)).collect();
        DynamicImage::ImageLuma8(GrayImage::from_raw(w, h, bytes).expect("buffer sized"))
    } else {
        let n = img.pixel_count();
        let mut bytes = Vec::with_capacity(3 * n);
        for i in 0..n {
            for c in 0..3 {
                bytes.push(quantize(img.data[c * n + i]));
            }
        }
        DynamicImage::ImageRgb8(RgbImage::from_raw(w, h, bytes).expect("buffer sized"))
    };
    let mut out = std::io::Cursor::new(Vec::new());
    dynamic
        .write_to(&mut out, image::ImageFormat::Png)
        .map_err(|e| Error::Format {
            path: "<memory>".into(),
            message: e.to_string(),
        })?;
    Ok(out.into_inner())
}

/// Writes an 8-bit PNG; each element becomes `round(clamp(x, 0, 1) * 255)`.
pub fn save_image(img: &Image, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_png(img)?;
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Rec. 601 luma. Single-channel input is returned unchanged.
pub fn to_luma(img: &Image) -> Image {
    if img.channels == 1 {
        return img.clone();
    }
    let (r, g, b) = (img.plane(0), img.plane(1), img.plane(2));
    let data = r
        .iter()
        .zip(g)
        .zip(b)
        .map(|((&r, &g), &b)| LUMA_WEIGHTS[0] * r + LUMA_WEIGHTS[1] * g + LUMA_WEIGHTS[2] * b)
        .collect();
    Image::from_clamped(img.height, img.width, 1, data).expect("shape preserved")
}
