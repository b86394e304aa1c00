//! Image and mask I/O plus the binary mask raster.

use std::io::Cursor;
use std::path::Path;

use image::{DynamicImage, GrayImage, ImageFormat, Luma, RgbImage};

use crate::error::{Error, Result};

/// An image handed to a provider, with the identity and side assets some
/// backends need.
#[derive(Debug, Clone, Copy)]
pub struct ImageInput<'a> {
    pub id: &'a str,
    pub image: &'a RgbImage,
    pub mask_ref: Option<&'a Path>,
}

impl<'a> ImageInput<'a> {
    pub fn new(id: &'a str, image: &'a RgbImage) -> Self {
        ImageInput {
            id,
            image,
            mask_ref: None,
        }
    }

    pub fn with_mask(mut self, mask_ref: Option<&'a Path>) -> Self {
        self.mask_ref = mask_ref;
        self
    }
}

/// Binary per-pixel foreground map.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    width: u32,
    height: u32,
    bits: Vec<bool>,
}

impl Mask {
    pub fn new(width: u32, height: u32) -> Self {
        Mask {
            width,
            height,
            bits: vec![false; (width as usize) * (height as usize)],
        }
    }

    pub fn full(width: u32, height: u32) -> Self {
        Mask {
            width,
            height,
            bits: vec![true; (width as usize) * (height as usize)],
        }
    }

    pub fn from_fn(width: u32, height: u32, mut f: impl FnMut(u32, u32) -> bool) -> Self {
        let mut m = Mask::new(width, height);
        for y in 0..height {
            for x in 0..width {
                m.set(x, y, f(x, y));
            }
        }
        m
    }

    /// Nonzero pixels are foreground.
    pub fn from_gray(img: &GrayImage) -> Self {
        Mask {
            width: img.width(),
            height: img.height(),
            bits: img.as_raw().iter().map(|&v| v != 0).collect(),
        }
    }

    pub fn to_gray(&self) -> GrayImage {
        GrayImage::from_fn(self.width, self.height, |x, y| {
            Luma([if self.get(x, y) { 255 } else { 0 }])
        })
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn dims(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32) -> bool {
        self.bits[(y as usize) * (self.width as usize) + x as usize]
    }

    #[inline]
    pub fn set(&mut self, x: u32, y: u32, v: bool) {
        let w = self.width as usize;
        self.bits[(y as usize) * w + x as usize] = v;
    }

    /// Foreground test at a sub-pixel location (pixel-center convention);
    /// locations outside the raster are background.
    pub fn contains_point(&self, x: f32, y: f32) -> bool {
        let (xi, yi) = (x.round(), y.round());
        if xi < 0.0 || yi < 0.0 || xi >= self.width as f32 || yi >= self.height as f32 {
            return false;
        }
        self.get(xi as u32, yi as u32)
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Sub-rectangle `[x1, x2) × [y1, y2)`.
    pub fn crop(&self, x1: u32, y1: u32, x2: u32, y2: u32) -> Mask {
        Mask::from_fn(x2 - x1, y2 - y1, |x, y| self.get(x + x1, y + y1))
    }

    /// Tight bounding box `[x1, y1, x2, y2]` of the foreground, exclusive on
    /// the high side.
    pub fn bounding_box(&self) -> Option<[u32; 4]> {
        let mut bb: Option<[u32; 4]> = None;
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(x, y) {
                    let b = bb.get_or_insert([x, y, x + 1, y + 1]);
                    b[0] = b[0].min(x);
                    b[1] = b[1].min(y);
                    b[2] = b[2].max(x + 1);
                    b[3] = b[3].max(y + 1);
                }
            }
        }
        bb
    }

    pub fn iou(&self, other: &Mask) -> f64 {
        assert_eq!(self.dims(), other.dims());
        let (mut inter, mut union) = (0usize, 0usize);
        for (a, b) in self.bits.iter().zip(&other.bits) {
            inter += (*a && *b) as usize;
            union += (*a || *b) as usize;
        }
        if union == 0 {
            1.0
        } else {
            inter as f64 / union as f64
        }
    }
}

/// Converts a decoded image to RGB, rejecting anything that is not
/// 3-channel.
pub fn require_rgb(img: DynamicImage) -> Result<RgbImage> {
    match img {
        DynamicImage::ImageRgb8(rgb) => Ok(rgb),
        DynamicImage::ImageRgb16(_) | DynamicImage::ImageRgb32F(_) => Ok(img.to_rgb8()),
        other => Err(Error::ChannelCount(other.color().channel_count())),
    }
}

pub fn load_rgb(path: &Path) -> Result<RgbImage> {
    let img = image::open(path).map_err(|e| Error::Image {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    require_rgb(img)
}

pub fn decode_rgb(bytes: &[u8], name: &str) -> Result<RgbImage> {
    let img = image::load_from_memory(bytes).map_err(|e| Error::Image {
        path: name.to_string(),
        message: e.to_string(),
    })?;
    require_rgb(img)
}

pub fn load_mask(path: &Path) -> Result<Mask> {
    let img = image::open(path).map_err(|e| Error::Image {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    match img {
        DynamicImage::ImageLuma8(g) => Ok(Mask::from_gray(&g)),
        other => Err(Error::Image {
            path: path.display().to_string(),
            message: format!("mask must be 8-bit single channel, got {:?}", other.color()),
        }),
    }
}

pub fn encode_png_rgb(img: &RgbImage) -> Vec<u8> {
    let mut buf = Cursor::new(Vec::new());
    img.write_to(&mut buf, ImageFormat::Png)
        .expect("png encoding into memory cannot fail");
    buf.into_inner()
}

pub fn save_png_rgb(img: &RgbImage, path: &Path) -> Result<()> {
    std::fs::write(path, encode_png_rgb(img)).map_err(|e| Error::io(path, e))
}

pub fn save_mask(mask: &Mask, path: &Path) -> Result<()> {
    let mut buf = Cursor::new(Vec::new());
    mask.to_gray()
        .write_to(&mut buf, ImageFormat::Png)
        .expect("png encoding into memory cannot fail");
    std::fs::write(path, buf.into_inner()).map_err(|e| Error::io(path, e))
}

/// Grayscale conversion to `[0, 1]` floats, row-major.
pub fn to_gray_f32(img: &RgbImage) -> Vec<f32> {
    img.pixels()
        .map(|p| (0.299 * p[0] as f32 + 0.587 * p[1] as f32 + 0.114 * p[2] as f32) / 255.0)
        .collect()
}
