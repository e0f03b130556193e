//! Dense pixel, latent and mask grids.
//!
//! Images and latents are stored `h × w × c` in row-major order with `f64`
//! samples. Masks are boolean `h × w` grids.

use std::path::Path;

use ndarray::{Array2, Array3, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

macro_rules! grid3 {
    ($name:ident) => {
        #[derive(Debug, Clone, PartialEq)]
        pub struct $name {
            data: Array3<f64>,
        }

        impl $name {
            pub fn zeros(h: usize, w: usize, c: usize) -> Self {
                Self {
                    data: Array3::zeros((h, w, c)),
                }
            }

            pub fn filled(h: usize, w: usize, c: usize, value: f64) -> Self {
                Self {
                    data: Array3::from_elem((h, w, c), value),
                }
            }

            pub fn from_array(data: Array3<f64>) -> Result<Self> {
                let (h, w, c) = data.dim();
                if h == 0 || w == 0 || c == 0 {
                    return Err(Error::DimensionMismatch(format!(
                        "{} must be non-empty, got {h}x{w}x{c}",
                        stringify!($name)
                    )));
                }
                Ok(Self { data })
            }

            pub fn from_fn(h: usize, w: usize, c: usize, f: impl FnMut((usize, usize, usize)) -> f64) -> Self {
                Self {
                    data: Array3::from_shape_fn((h, w, c), f),
                }
            }

            pub fn height(&self) -> usize {
                self.data.dim().0
            }

            pub fn width(&self) -> usize {
                self.data.dim().1
            }

            pub fn channels(&self) -> usize {
                self.data.dim().2
            }

            pub fn dims(&self) -> (usize, usize, usize) {
                self.data.dim()
            }

            pub fn array(&self) -> &Array3<f64> {
                &self.data
            }

            pub fn array_mut(&mut self) -> &mut Array3<f64> {
                &mut self.data
            }

            pub fn into_array(self) -> Array3<f64> {
                self.data
            }

            pub fn is_finite(&self) -> bool {
                self.data.iter().all(|v| v.is_finite())
            }

            pub fn max_abs_diff(&self, other: &Self) -> f64 {
                Zip::from(&self.data)
                    .and(&other.data)
                    .fold(0.0f64, |acc, a, b| acc.max((a - b).abs()))
            }

            #[allow(dead_code)]
            pub(crate) fn ensure_same_dims(&self, other: &Self) -> Result<()> {
                if self.dims() != other.dims() {
                    let (a, b, c) = self.dims();
                    let (x, y, z) = other.dims();
                    return Err(Error::shape(&[a, b, c], &[x, y, z]));
                }
                Ok(())
            }
        }
    };
}

grid3!(ImageGrid);
grid3!(LatentGrid);

impl ImageGrid {
    /// Loads an 8-bit PNG (or any format the `image` crate decodes) as RGB in [0, 1].
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let img = image::open(path)?.to_rgb8();
        let (w, h) = img.dimensions();
        let data = Array3::from_shape_fn((h as usize, w as usize, 3), |(y, x, c)| {
            img.get_pixel(x as u32, y as u32)[c] as f64 / 255.0
        });
        Self::from_array(data)
    }

    fn to_dynamic(&self) -> Result<image::DynamicImage> {
        let (h, w, c) = self.dims();
        let quantize = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        match c {
            3 => Ok(image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
                let px = |k| quantize(self.data[[y as usize, x as usize, k]]);
                image::Rgb([px(0), px(1), px(2)])
            })
            .into()),
            1 => Ok(image::GrayImage::from_fn(w as u32, h as u32, |x, y| {
                image::Luma([quantize(self.data[[y as usize, x as usize, 0]])])
            })
            .into()),
            _ => Err(Error::DimensionMismatch(format!(
                "cannot write {c}-channel image as PNG"
            ))),
        }
    }

    /// Writes an RGB (3-channel) or grayscale (1-channel) 8-bit PNG.
    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_dynamic()?.save_with_format(path, image::ImageFormat::Png)?;
        Ok(())
    }

    pub fn to_png_bytes(&self) -> Result<Vec<u8>> {
        let mut out = std::io::Cursor::new(Vec::new());
        self.to_dynamic()?.write_to(&mut out, image::ImageFormat::Png)?;
        Ok(out.into_inner())
    }

    pub fn from_png_bytes(bytes: &[u8]) -> Result<Self> {
        let img = image::load_from_memory(bytes)?.to_rgb8();
        let (w, h) = img.dimensions();
        Self::from_array(Array3::from_shape_fn((h as usize, w as usize, 3), |(y, x, c)| {
            img.get_pixel(x as u32, y as u32)[c] as f64 / 255.0
        }))
    }

    pub fn clamped(mut self) -> Self {
        self.data.mapv_inplace(|v| v.clamp(0.0, 1.0));
        self
    }

    pub fn resize(&self, h: usize, w: usize) -> Self {
        Self {
            data: resize_bilinear(&self.data, h, w),
        }
    }

    pub fn crop(&self, bbox: &BoundingBox) -> Self {
        Self {
            data: self
                .data
                .slice(ndarray::s![bbox.top..bbox.bottom, bbox.left..bbox.right, ..])
                .to_owned(),
        }
    }

    /// Overwrites the `bbox` region with `patch`, which must have the box's size.
    pub fn paste(&mut self, patch: &ImageGrid, bbox: &BoundingBox) -> Result<()> {
        if patch.height() != bbox.height() || patch.width() != bbox.width() || patch.channels() != self.channels() {
            return Err(Error::shape(
                &[bbox.height(), bbox.width(), self.channels()],
                &[patch.height(), patch.width(), patch.channels()],
            ));
        }
        self.data
            .slice_mut(ndarray::s![bbox.top..bbox.bottom, bbox.left..bbox.right, ..])
            .assign(&patch.data);
        Ok(())
    }
}

impl LatentGrid {
    pub fn resize(&self, h: usize, w: usize) -> Self {
        Self {
            data: resize_bilinear(&self.data, h, w),
        }
    }
}

/// Bilinear resampling with half-pixel centres and clamped borders.
///
/// Same-size resizes return an exact copy.
pub fn resize_bilinear(src: &Array3<f64>, h: usize, w: usize) -> Array3<f64> {
    let (sh, sw, c) = src.dim();
    if sh == h && sw == w {
        return src.clone();
    }
    let coord = |dst: usize, dst_len: usize, src_len: usize| -> (usize, usize, f64) {
        let pos = ((dst as f64 + 0.5) * src_len as f64 / dst_len as f64 - 0.5).clamp(0.0, (src_len - 1) as f64);
        let lo = pos.floor() as usize;
        let hi = (lo + 1).min(src_len - 1);
        (lo, hi, pos - lo as f64)
    };
    let rows: Vec<_> = (0..h).map(|y| coord(y, h, sh)).collect();
    let cols: Vec<_> = (0..w).map(|x| coord(x, w, sw)).collect();
    Array3::from_shape_fn((h, w, c), |(y, x, k)| {
        let (y0, y1, fy) = rows[y];
        let (x0, x1, fx) = cols[x];
        let top = src[[y0, x0, k]] * (1.0 - fx) + src[[y0, x1, k]] * fx;
        let bottom = src[[y1, x0, k]] * (1.0 - fx) + src[[y1, x1, k]] * fx;
        top * (1.0 - fy) + bottom * fy
    })
}

/// Axis-aligned box with exclusive `bottom`/`right` edges.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BoundingBox {
    pub top: usize,
    pub left: usize,
    pub bottom: usize,
    pub right: usize,
}

impl BoundingBox {
    pub fn new(top: usize, left: usize, bottom: usize, right: usize) -> Self {
        debug_assert!(bottom > top && right > left);
        Self {
            top,
            left,
            bottom,
            right,
        }
    }

    /// From an `[x, y, w, h]` annotation box.
    pub fn from_xywh(x: usize, y: usize, w: usize, h: usize) -> Self {
        Self::new(y, x, y + h, x + w)
    }

    pub fn full(h: usize, w: usize) -> Self {
        Self::new(0, 0, h, w)
    }

    pub fn height(&self) -> usize {
        self.bottom - self.top
    }

    pub fn width(&self) -> usize {
        self.right - self.left
    }

    pub fn area(&self) -> usize {
        self.height() * self.width()
    }

    pub fn contains(&self, y: usize, x: usize) -> bool {
        y >= self.top && y < self.bottom && x >= self.left && x < self.right
    }

    pub fn contains_box(&self, other: &BoundingBox) -> bool {
        other.top >= self.top && other.left >= self.left && other.bottom <= self.bottom && other.right <= self.right
    }

    /// Grows every side by `pad` pixels, clipped to an `h × w` frame.
    pub fn padded(&self, pad: usize, h: usize, w: usize) -> Self {
        Self::new(
            self.top.saturating_sub(pad),
            self.left.saturating_sub(pad),
            (self.bottom + pad).min(h),
            (self.right + pad).min(w),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    data: Array2<bool>,
}

impl BinaryMask {
    pub fn empty(h: usize, w: usize) -> Self {
        Self {
            data: Array2::from_elem((h, w), false),
        }
    }

    pub fn full(h: usize, w: usize) -> Self {
        Self {
            data: Array2::from_elem((h, w), true),
        }
    }

    pub fn from_array(data: Array2<bool>) -> Self {
        Self { data }
    }

    pub fn from_fn(h: usize, w: usize, f: impl FnMut((usize, usize)) -> bool) -> Self {
        Self {
            data: Array2::from_shape_fn((h, w), f),
        }
    }

    pub fn from_box(h: usize, w: usize, bbox: &BoundingBox) -> Self {
        Self::from_fn(h, w, |(y, x)| bbox.contains(y, x))
    }

    /// Reads a single-channel PNG; values above 127 are inside the region.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let img = image::open(path.as_ref())?.to_luma8();
        let (w, h) = img.dimensions();
        Ok(Self::from_fn(h as usize, w as usize, |(y, x)| {
            img.get_pixel(x as u32, y as u32)[0] > 127
        }))
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let (h, w) = self.data.dim();
        let img = image::GrayImage::from_fn(w as u32, h as u32, |x, y| {
            image::Luma([if self.data[[y as usize, x as usize]] { 255 } else { 0 }])
        });
        img.save_with_format(path, image::ImageFormat::Png)?;
        Ok(())
    }

    pub fn height(&self) -> usize {
        self.data.dim().0
    }

    pub fn width(&self) -> usize {
        self.data.dim().1
    }

    pub fn dims(&self) -> (usize, usize) {
        self.data.dim()
    }

    pub fn array(&self) -> &Array2<bool> {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[[y, x]]
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&v| v)
    }

    /// Tight bounding box of the set pixels.
    pub fn bbox(&self) -> Option<BoundingBox> {
        let mut b: Option<BoundingBox> = None;
        for ((y, x), &v) in self.data.indexed_iter() {
            if !v {
                continue;
            }
            b = Some(match b {
                None => BoundingBox::new(y, x, y + 1, x + 1),
                Some(b) => BoundingBox::new(b.top.min(y), b.left.min(x), b.bottom.max(y + 1), b.right.max(x + 1)),
            });
        }
        b
    }

    pub fn is_subset_of(&self, other: &BinaryMask) -> bool {
        self.dims() == other.dims() && Zip::from(&self.data).and(&other.data).all(|&a, &b| !a || b)
    }

    pub fn crop(&self, bbox: &BoundingBox) -> Self {
        Self {
            data: self
                .data
                .slice(ndarray::s![bbox.top..bbox.bottom, bbox.left..bbox.right])
                .to_owned(),
        }
    }

    /// Nearest-neighbour resampling at pixel centres.
    pub fn resize_nearest(&self, h: usize, w: usize) -> Self {
        let (sh, sw) = self.dims();
        if (sh, sw) == (h, w) {
            return self.clone();
        }
        let src = |dst: usize, dst_len: usize, src_len: usize| {
            (((dst as f64 + 0.5) * src_len as f64 / dst_len as f64) as usize).min(src_len - 1)
        };
        Self::from_fn(h, w, |(y, x)| self.data[[src(y, h, sh), src(x, w, sw)]])
    }

    /// Morphological dilation with a `(2r+1)²` square structuring element.
    pub fn dilate(&self, radius: usize) -> Self {
        if radius == 0 {
            return self.clone();
        }
        let (h, w) = self.dims();
        let mut rows = Array2::from_elem((h, w), false);
        for y in 0..h {
            for x in 0..w {
                let lo = x.saturating_sub(radius);
                let hi = (x + radius + 1).min(w);
                rows[[y, x]] = (lo..hi).any(|k| self.data[[y, k]]);
            }
        }
        Self::from_fn(h, w, |(y, x)| {
            let lo = y.saturating_sub(radius);
            let hi = (y + radius + 1).min(h);
            (lo..hi).any(|k| rows[[k, x]])
        })
    }

    /// 1.0 inside, 0.0 outside.
    pub fn weights(&self) -> Array2<f64> {
        self.data.mapv(|v| if v { 1.0 } else { 0.0 })
    }
}
