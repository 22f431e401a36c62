//! RGB images with unit-interval channel values, PNG I/O and tensor conversion.

use std::path::Path;

use candle_core::{DType, Device, Tensor};
use image::imageops::{self, FilterType};
use image::{Rgb32FImage, RgbImage};

use crate::{Error, Result};

/// Row-major, channel-interleaved RGB image with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn filled(width: usize, height: usize, rgb: [f32; 3]) -> Self {
        assert!(width > 0 && height > 0, "image dimensions must be positive");
        let data = rgb
            .iter()
            .copied()
            .cycle()
            .take(width * height * 3)
            .collect();
        Self {
            width,
            height,
            data,
        }
    }

    pub fn white(width: usize, height: usize) -> Self {
        Self::filled(width, height, [1.0; 3])
    }

    pub fn from_raw(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 || data.len() != width * height * 3 {
            return Err(Error::Shape(format!(
                "{} values for a {width}x{height} rgb image",
                data.len()
            )));
        }
        if data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Invalid("image values must lie in [0, 1]".into()));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn put(&mut self, x: usize, y: usize, rgb: [f32; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Writes `rgb` if `(x, y)` lies inside the image.
    pub fn put_signed(&mut self, x: i64, y: i64, rgb: [f32; 3]) {
        if x >= 0 && y >= 0 && (x as usize) < self.width && (y as usize) < self.height {
            self.put(x as usize, y as usize, rgb);
        }
    }

    /// Copies `src` with its top-left corner at `(x0, y0)`; out-of-range pixels are dropped.
    pub fn blit(&mut self, src: &Image, x0: usize, y0: usize) {
        for y in 0..src.height {
            for x in 0..src.width {
                if x0 + x < self.width && y0 + y < self.height {
                    self.put(x0 + x, y0 + y, src.pixel(x, y));
                }
            }
        }
    }

    /// Snaps every value to the nearest 8-bit level, so PNG round trips are exact.
    pub fn quantized(mut self) -> Self {
        for v in &mut self.data {
            *v = quantize(*v);
        }
        self
    }

    /// Antialiased bilinear (triangle filter) resampling.
    pub fn resize(&self, width: usize, height: usize) -> Image {
        if width == self.width && height == self.height {
            return self.clone();
        }
        let buf = Rgb32FImage::from_raw(self.width as u32, self.height as u32, self.data.clone())
            .expect("buffer length matches dimensions");
        let out = imageops::resize(&buf, width as u32, height as u32, FilterType::Triangle);
        let data = out
            .into_raw()
            .into_iter()
            .map(|v| v.clamp(0.0, 1.0))
            .collect();
        Image {
            width,
            height,
            data,
        }
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)
            .map_err(|source| Error::Image {
                path: path.to_path_buf(),
                source,
            })?
            .to_rgb8();
        let (w, h) = img.dimensions();
        let data = img
            .into_raw()
            .into_iter()
            .map(|b| b as f32 / 255.0)
            .collect();
        Ok(Self {
            width: w as usize,
            height: h as usize,
            data,
        })
    }

    pub fn to_rgb8(&self) -> RgbImage {
        let bytes = self.data.iter().map(|&v| to_byte(v)).collect();
        RgbImage::from_raw(self.width as u32, self.height as u32, bytes)
            .expect("buffer length matches dimensions")
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_rgb8().save(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
    }

    /// `(3, H, W)` tensor.
    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        let t = Tensor::from_slice(&self.data, (self.height, self.width, 3), device)?;
        Ok(t.permute((2, 0, 1))?.contiguous()?.to_dtype(dtype)?)
    }

    /// Reads a `(3, H, W)` tensor, clamping values into `[0, 1]`.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let (c, h, w) = t.dims3()?;
        if c != 3 {
            return Err(Error::Shape(format!("expected 3 channels, got {c}")));
        }
        let data = t
            .permute((1, 2, 0))?
            .to_dtype(DType::F32)?
            .flatten_all()?
            .to_vec1::<f32>()?
            .into_iter()
            .map(|v| if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) })
            .collect();
        Ok(Self {
            width: w,
            height: h,
            data,
        })
    }
}

pub fn quantize(v: f32) -> f32 {
    to_byte(v) as f32 / 255.0
}

fn to_byte(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Stacks equally sized images into a `(B, 3, H, W)` tensor.
pub fn batch_tensor(images: &[&Image], dtype: DType, device: &Device) -> Result<Tensor> {
    let first = images
        .first()
        .ok_or_else(|| Error::Empty("image batch".into()))?;
    let tensors = images
        .iter()
        .map(|img| {
            if img.width != first.width || img.height != first.height {
                return Err(Error::Shape("images in a batch must share a size".into()));
            }
            img.to_tensor(dtype, device)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Tensor::stack(&tensors, 0)?)
}

/// Splits a `(B, 3, H, W)` tensor back into images.
pub fn unbatch(t: &Tensor) -> Result<Vec<Image>> {
    let b = t.dim(0)?;
    (0..b).map(|i| Image::from_tensor(&t.get(i)?)).collect()
}

/// Row-major grid with white gutters between (and around) cells. Cells may differ in size;
/// each cell slot is as large as the largest image.
pub fn compose_grid(rows: &[Vec<Image>], gutter: usize) -> Result<Image> {
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    if rows.is_empty() || cols == 0 {
        return Err(Error::Empty("grid has no cells".into()));
    }
    let cell_w = rows.iter().flatten().map(Image::width).max().unwrap_or(1);
    let cell_h = rows.iter().flatten().map(Image::height).max().unwrap_or(1);
    let width = cols * cell_w + (cols + 1) * gutter;
    let height = rows.len() * cell_h + (rows.len() + 1) * gutter;
    let mut grid = Image::white(width, height);
    for (r, row) in rows.iter().enumerate() {
        for (c, img) in row.iter().enumerate() {
            let x0 = gutter + c * (cell_w + gutter);
            let y0 = gutter + r * (cell_h + gutter);
            grid.blit(img, x0, y0);
        }
    }
    Ok(grid)
}
