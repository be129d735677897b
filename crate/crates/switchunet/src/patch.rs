//! Patch-based image pipeline: [0,1] normalization, overlapped patch
//! planning and extraction, probability stitching, one-hot encoding, and
//! 8-bit grayscale mask handling.

use std::path::Path;

use image::GrayImage;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape, Tensor};

/// Default sliding-window size.
pub const DEFAULT_PATCH: usize = 512;
/// Default overlap between adjacent windows, in pixels per axis.
pub const DEFAULT_OVERLAP: usize = 10;
/// Grayscale threshold above which a mask pixel counts as foreground.
pub const MASK_THRESHOLD: u8 = 128;

/// Binary mask with one byte per pixel, values in {0, 1}.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl Mask {
    pub fn from_gray(img: &GrayImage) -> Mask {
        Mask {
            width: img.width() as usize,
            height: img.height() as usize,
            data: img.pixels().map(|p| u8::from(p.0[0] >= MASK_THRESHOLD)).collect(),
        }
    }

    pub fn load(path: &Path) -> Result<Mask> {
        let img = image::open(path)
            .map_err(|e| Error::data(format!("cannot read mask {}: {e}", path.display())))?
            .into_luma8();
        Ok(Mask::from_gray(&img))
    }

    /// Writes the mask as an 8-bit PNG with values {0, 255}.
    pub fn save(&self, path: &Path) -> Result<()> {
        let img = GrayImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            image::Luma([if self.data[y as usize * self.width + x as usize] != 0 {
                255
            } else {
                0
            }])
        });
        img.save(path)?;
        Ok(())
    }

    pub fn at(&self, x: usize, y: usize) -> u8 {
        self.data[y * self.width + x]
    }
}

/// Maps 8-bit grayscale to a (1, 1, h, w) tensor with v -> v / 255.
pub fn normalize<T: Scalar>(img: &GrayImage) -> Tensor<T> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = img
        .pixels()
        .map(|p| T::of_f64(p.0[0] as f64 / 255.0))
        .collect();
    Tensor::new(Shape::new(1, 1, h, w), data).expect("pixel count matches")
}

/// Patch layout for one source image: window size, overlap, and the
/// top-left origin of every window.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PatchGrid {
    pub patch: usize,
    pub overlap: usize,
    pub image_w: usize,
    pub image_h: usize,
    pub xs: Vec<usize>,
    pub ys: Vec<usize>,
}

impl PatchGrid {
    /// Origins in row-major order (y outer, x inner).
    pub fn origins(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::with_capacity(self.xs.len() * self.ys.len());
        for &y in &self.ys {
            for &x in &self.xs {
                out.push((x, y));
            }
        }
        out
    }

    pub fn len(&self) -> usize {
        self.xs.len() * self.ys.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

fn axis_origins(dim: usize, patch: usize, stride: usize) -> Vec<usize> {
    if dim <= patch {
        return vec![0];
    }
    let mut origins = Vec::new();
    let mut o = 0;
    loop {
        if o + patch >= dim {
            // clamp the final window to end exactly at the image edge
            let last = dim - patch;
            if origins.last() != Some(&last) {
                origins.push(last);
            }
            break;
        }
        origins.push(o);
        o += stride;
    }
    origins
}

/// Plans sliding-window origins: regular stride = patch - overlap, with the
/// final origin clamped so the last window ends at the image edge. Images
/// smaller than the window get a single zero origin (extraction pads).
pub fn plan_patches(
    image_w: usize,
    image_h: usize,
    patch: usize,
    overlap: usize,
) -> Result<PatchGrid> {
    if patch <= overlap {
        return Err(Error::argument(format!(
            "patch size {patch} must exceed overlap {overlap}"
        )));
    }
    let stride = patch - overlap;
    Ok(PatchGrid {
        patch,
        overlap,
        image_w,
        image_h,
        xs: axis_origins(image_w, patch, stride),
        ys: axis_origins(image_h, patch, stride),
    })
}

/// Copies out every window of the grid, zero-filling parts that fall outside
/// an undersized image.
pub fn extract_patches<T: Scalar>(image: &Tensor<T>, grid: &PatchGrid) -> Result<Vec<Tensor<T>>> {
    let s = image.shape();
    if s.n != 1 || s.h != grid.image_h || s.w != grid.image_w {
        return Err(Error::argument(format!(
            "grid was planned for 1x{}x{} but the image is {}",
            grid.image_h, grid.image_w, s
        )));
    }
    let p = grid.patch;
    let mut out = Vec::with_capacity(grid.len());
    for (ox, oy) in grid.origins() {
        let t = Tensor::from_fn(Shape::new(1, s.c, p, p), |_, c, y, x| {
            let (iy, ix) = (oy + y, ox + x);
            if iy < s.h && ix < s.w {
                image.at(0, c, iy, ix)
            } else {
                T::zero()
            }
        });
        out.push(t);
    }
    Ok(out)
}

/// Recombines per-patch outputs into a full-size map by per-pixel averaging
/// of every window covering that pixel. Accumulation runs in f64 so the
/// identity round trip is exact for f32 inputs.
pub fn stitch<T: Scalar>(patch_outputs: &[Tensor<T>], grid: &PatchGrid) -> Result<Tensor<T>> {
    if patch_outputs.len() != grid.len() {
        return Err(Error::argument(format!(
            "expected {} patch outputs, got {}",
            grid.len(),
            patch_outputs.len()
        )));
    }
    let first = &patch_outputs[0];
    let c = first.shape().c;
    let p = grid.patch;
    for t in patch_outputs {
        if t.shape() != Shape::new(1, c, p, p) {
            return Err(Error::argument(format!(
                "patch output has shape {}, expected (1, {c}, {p}, {p})",
                t.shape()
            )));
        }
    }
    let (w, h) = (grid.image_w, grid.image_h);
    let mut acc = vec![0f64; c * h * w];
    let mut cover = vec![0u32; h * w];
    for ((ox, oy), t) in grid.origins().into_iter().zip(patch_outputs) {
        for y in 0..p {
            let iy = oy + y;
            if iy >= h {
                continue;
            }
            for x in 0..p {
                let ix = ox + x;
                if ix >= w {
                    continue;
                }
                cover[iy * w + ix] += 1;
                for ch in 0..c {
                    acc[(ch * h + iy) * w + ix] += t.at(0, ch, y, x).as_f64();
                }
            }
        }
    }
    debug_assert!(cover.iter().all(|&k| k > 0), "grid must cover every pixel");
    let mut data = Vec::with_capacity(c * h * w);
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let k = cover[y * w + x] as f64;
                data.push(T::of_f64(acc[(ch * h + y) * w + x] / k));
            }
        }
    }
    Tensor::new(Shape::new(1, c, h, w), data)
}

/// Expands a label mask into a per-class indicator tensor.
pub fn one_hot<T: Scalar>(mask: &Mask, num_classes: usize) -> Result<Tensor<T>> {
    if let Some(&bad) = mask.data.iter().find(|&&v| v as usize >= num_classes) {
        return Err(Error::data(format!(
            "mask label {bad} is out of range for {num_classes} classes"
        )));
    }
    Ok(Tensor::from_fn(
        Shape::new(1, num_classes, mask.height, mask.width),
        |_, c, y, x| {
            if mask.data[y * mask.width + x] as usize == c {
                T::one()
            } else {
                T::zero()
            }
        },
    ))
}

/// Collapses per-class probabilities back to a label mask via channel argmax.
pub fn argmax_channels<T: Scalar>(probs: &Tensor<T>) -> Mask {
    let s = probs.shape();
    let mut data = Vec::with_capacity(s.h * s.w);
    for y in 0..s.h {
        for x in 0..s.w {
            let mut best = 0usize;
            let mut best_v = probs.at(0, 0, y, x);
            for c in 1..s.c {
                let v = probs.at(0, c, y, x);
                if v > best_v {
                    best_v = v;
                    best = c;
                }
            }
            data.push(best as u8);
        }
    }
    Mask { width: s.w, height: s.h, data }
}
