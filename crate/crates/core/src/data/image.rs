//! Frame rasters: loading, grayscale conversion, resampling and geometric transforms.

use std::path::Path;

use image::{DynamicImage, GrayImage, Luma};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A single-channel image with values in `[0, 1]`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct GrayFrame {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<f32>,
}

impl GrayFrame {
    pub fn new(width: usize, height: usize, pixels: Vec<f32>) -> Self {
        assert_eq!(pixels.len(), width * height);
        GrayFrame { width, height, pixels }
    }

    pub fn filled(width: usize, height: usize, value: f32) -> Self {
        GrayFrame::new(width, height, vec![value; width * height])
    }

    #[inline]
    fn at_clamped(&self, x: isize, y: isize) -> f32 {
        let x = x.clamp(0, self.width as isize - 1) as usize;
        let y = y.clamp(0, self.height as isize - 1) as usize;
        self.pixels[y * self.width + x]
    }

    /// Bilinear sample at continuous pixel coordinates; outside samples replicate the edge.
    pub fn sample(&self, x: f64, y: f64) -> f32 {
        let (x0, y0) = (x.floor(), y.floor());
        let (fx, fy) = ((x - x0) as f32, (y - y0) as f32);
        let (x0, y0) = (x0 as isize, y0 as isize);
        let top = self.at_clamped(x0, y0) * (1.0 - fx) + self.at_clamped(x0 + 1, y0) * fx;
        let bottom = self.at_clamped(x0, y0 + 1) * (1.0 - fx) + self.at_clamped(x0 + 1, y0 + 1) * fx;
        top * (1.0 - fy) + bottom * fy
    }

    /// Bilinear resize with pixel-centre alignment. Same-size input is returned unchanged.
    pub fn resize(&self, width: usize, height: usize) -> GrayFrame {
        if width == self.width && height == self.height {
            return self.clone();
        }
        let sx = self.width as f64 / width as f64;
        let sy = self.height as f64 / height as f64;
        let mut pixels = Vec::with_capacity(width * height);
        for y in 0..height {
            let src_y = (y as f64 + 0.5) * sy - 0.5;
            for x in 0..width {
                let src_x = (x as f64 + 0.5) * sx - 0.5;
                pixels.push(self.sample(src_x, src_y));
            }
        }
        GrayFrame::new(width, height, pixels)
    }

    pub fn mirror(&self) -> GrayFrame {
        let mut pixels = Vec::with_capacity(self.pixels.len());
        for row in self.pixels.chunks(self.width) {
            pixels.extend(row.iter().rev());
        }
        GrayFrame::new(self.width, self.height, pixels)
    }

    /// Rotates the content counter-clockwise (as displayed) by `degrees` about
    /// the image centre, bilinear sampling with edge replication.
    pub fn rotate(&self, degrees: f64) -> GrayFrame {
        let (sin, cos) = degrees.to_radians().sin_cos();
        let cx = (self.width as f64 - 1.0) / 2.0;
        let cy = (self.height as f64 - 1.0) / 2.0;
        let mut pixels = Vec::with_capacity(self.pixels.len());
        for y in 0..self.height {
            let dy = y as f64 - cy;
            for x in 0..self.width {
                let dx = x as f64 - cx;
                // inverse map; y grows downwards
                let src_x = cos * dx - sin * dy + cx;
                let src_y = sin * dx + cos * dy + cy;
                pixels.push(self.sample(src_x, src_y));
            }
        }
        GrayFrame::new(self.width, self.height, pixels)
    }

    pub fn mean(&self) -> f64 {
        self.pixels.iter().map(|&p| p as f64).sum::<f64>() / self.pixels.len() as f64
    }

    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::new(&[1, self.height, self.width], self.pixels.clone()).expect("frame shape")
    }

    pub fn to_image(&self) -> GrayImage {
        GrayImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            let v = self.pixels[y as usize * self.width + x as usize];
            Luma([(v.clamp(0.0, 1.0) * 255.0).round() as u8])
        })
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_image()
            .save_with_format(path, image::ImageFormat::Png)
            .map_err(|e| Error::Ingestion {
                path: path.to_path_buf(),
                reason: e.to_string(),
            })
    }
}

/// Grayscale with `0.299R + 0.587G + 0.114B` for colour input, resized to
/// `side × side` and scaled to `[0, 1]`.
pub fn normalize_frame(img: &DynamicImage, side: usize) -> Result<GrayFrame> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    if w == 0 || h == 0 {
        return Err(Error::Ingestion {
            path: Default::default(),
            reason: "empty image".into(),
        });
    }
    let pixels: Vec<f32> = if img.color().has_color() {
        img.to_rgb8()
            .pixels()
            .map(|p| ((0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64) / 255.0) as f32)
            .collect()
    } else {
        img.to_luma8().pixels().map(|p| p[0] as f32 / 255.0).collect()
    };
    Ok(GrayFrame::new(w, h, pixels).resize(side, side))
}

pub fn load_frame(path: &Path, side: usize) -> Result<GrayFrame> {
    let img = image::open(path).map_err(|e| Error::Ingestion {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    normalize_frame(&img, side).map_err(|e| match e {
        Error::Ingestion { reason, .. } => Error::Ingestion {
            path: path.to_path_buf(),
            reason,
        },
        other => other,
    })
}
