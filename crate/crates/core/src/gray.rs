use std::path::Path;

use ::image::{DynamicImage, ImageBuffer, Luma};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Row-major grayscale intensities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Shape("image has a zero dimension".into()));
        }
        if data.len() != width * height {
            return Err(Error::Shape(format!(
                "{}x{} image needs {} values, got {}",
                width,
                height,
                width * height,
                data.len()
            )));
        }
        if let Some(i) = data
            .iter()
            .position(|v| !v.is_finite() || *v < 0.0 || *v > 1.0)
        {
            return Err(Error::Data(format!(
                "intensity {} at index {i} outside [0, 1]",
                data[i]
            )));
        }
        Ok(GrayImage {
            width,
            height,
            data,
        })
    }

    pub fn constant(width: usize, height: usize, value: f32) -> Self {
        Self::from_fn(width, height, |_, _| value)
    }

    /// Builds an image from `f(x, y)`, clamping into `[0, 1]`.
    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y).clamp(0.0, 1.0));
            }
        }
        GrayImage {
            width,
            height,
            data,
        }
    }

    pub(crate) fn from_raw_clamped(width: usize, height: usize, mut data: Vec<f32>) -> Self {
        debug_assert_eq!(data.len(), width * height);
        for v in &mut data {
            *v = v.clamp(0.0, 1.0);
        }
        GrayImage {
            width,
            height,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64
    }

    pub fn variance(&self) -> f64 {
        let m = self.mean();
        self.data
            .iter()
            .map(|&v| (v as f64 - m).powi(2))
            .sum::<f64>()
            / self.data.len() as f64
    }

    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Result<Self> {
        if w == 0 || h == 0 || x0 + w > self.width || y0 + h > self.height {
            return Err(Error::Shape(format!(
                "crop ({x0}, {y0}, {w}, {h}) outside {}x{} image",
                self.width, self.height
            )));
        }
        let mut data = Vec::with_capacity(w * h);
        for y in y0..y0 + h {
            data.extend_from_slice(&self.data[y * self.width + x0..y * self.width + x0 + w]);
        }
        Ok(GrayImage {
            width: w,
            height: h,
            data,
        })
    }

    /// Center-crops to the largest multiple of `k` in each dimension.
    pub fn crop_to_multiple(&self, k: usize) -> Result<Self> {
        let (x0, y0, w, h) = multiple_crop_window(self.width, self.height, k)?;
        if w == self.width && h == self.height {
            return Ok(self.clone());
        }
        self.crop(x0, y0, w, h)
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor {
            dims: vec![self.height, self.width],
            data: self.data.clone(),
        }
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        match t.dims.as_slice() {
            &[h, w] => GrayImage::new(w, h, t.data.clone()),
            dims => Err(Error::Shape(format!("image tensor must be 2-D, got {dims:?}"))),
        }
    }

    pub fn to_luma8(&self) -> ImageBuffer<Luma<u8>, Vec<u8>> {
        let px = self
            .data
            .iter()
            .map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect();
        ImageBuffer::from_raw(self.width as u32, self.height as u32, px)
            .expect("buffer length matches dims")
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        self.to_luma8()
            .save(path)
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }
}

/// `(x0, y0, w, h)` of the centered window whose sides are multiples of `k`.
pub fn multiple_crop_window(
    width: usize,
    height: usize,
    k: usize,
) -> Result<(usize, usize, usize, usize)> {
    if k == 0 {
        return Err(Error::Config("patch size must be at least 1".into()));
    }
    let w = width / k * k;
    let h = height / k * k;
    if w == 0 || h == 0 {
        return Err(Error::Shape(format!(
            "{width}x{height} image is smaller than one {k}x{k} patch"
        )));
    }
    Ok(((width - w) / 2, (height - h) / 2, w, h))
}

pub fn load_image(path: impl AsRef<Path>) -> Result<GrayImage> {
    let path = path.as_ref();
    let img = ::image::open(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    from_dynamic(img)
}

/// 8-bit channels divide by 255, 16-bit by 65535; color is reduced to the
/// plain average of its channels.
pub fn from_dynamic(img: DynamicImage) -> Result<GrayImage> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data: Vec<f32> = match img {
        DynamicImage::ImageLuma8(b) => b.pixels().map(|p| p.0[0] as f32 / 255.0).collect(),
        DynamicImage::ImageLumaA8(b) => b.pixels().map(|p| p.0[0] as f32 / 255.0).collect(),
        DynamicImage::ImageLuma16(b) => b.pixels().map(|p| p.0[0] as f32 / 65535.0).collect(),
        DynamicImage::ImageLumaA16(b) => b.pixels().map(|p| p.0[0] as f32 / 65535.0).collect(),
        DynamicImage::ImageRgb8(b) => b.pixels().map(|p| rgb_mean(p.0, 255.0)).collect(),
        DynamicImage::ImageRgba8(b) => b
            .pixels()
            .map(|p| rgb_mean([p.0[0], p.0[1], p.0[2]], 255.0))
            .collect(),
        DynamicImage::ImageRgb16(b) => b.pixels().map(|p| rgb_mean(p.0, 65535.0)).collect(),
        DynamicImage::ImageRgba16(b) => b
            .pixels()
            .map(|p| rgb_mean([p.0[0], p.0[1], p.0[2]], 65535.0))
            .collect(),
        other => {
            return Err(Error::Format(format!(
                "unsupported pixel layout {:?}",
                other.color()
            )))
        }
    };
    GrayImage::new(w, h, data.into_iter().map(|v| v.clamp(0.0, 1.0)).collect())
}

fn rgb_mean<T: Into<f64> + Copy>(c: [T; 3], scale: f64) -> f32 {
    ((c[0].into() + c[1].into() + c[2].into()) / 3.0 / scale) as f32
}
