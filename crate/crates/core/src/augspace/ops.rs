//! Pixel kernels behind the catalog operations.
//!
//! Ops with 8-bit semantics (autocontrast, equalize, posterize, solarize)
//! quantize each channel to 0..=255, operate on levels and dequantize.
//! Geometric ops sample nearest neighbours and fill exposed pixels with
//! [`FILL_VALUE`].

use rand::Rng;

use crate::image::{dequantize, Image};

/// Value written to pixels exposed by geometric ops and cropshift padding.
pub const FILL_VALUE: f32 = 0.0;

const ERASE_ASPECT: (f32, f32) = (0.3, 3.3);
const ERASE_ATTEMPTS: usize = 10;

pub(super) fn hflip(img: &Image) -> Image {
    let mut out = img.clone();
    let (c, h, w) = img.shape();
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                out.set(ch, y, x, img.get(ch, y, w - 1 - x));
            }
        }
    }
    out
}

/// Output pixel `(y, x)` reads source `(y + dy, x + dx)` or the fill value.
fn shift(img: &Image, dx: i64, dy: i64) -> Image {
    let (c, h, w) = img.shape();
    let mut out = Image::filled(c, h, w, FILL_VALUE);
    for ch in 0..c {
        for y in 0..h as i64 {
            let sy = y + dy;
            if sy < 0 || sy >= h as i64 {
                continue;
            }
            for x in 0..w as i64 {
                let sx = x + dx;
                if sx < 0 || sx >= w as i64 {
                    continue;
                }
                out.set(ch, y as usize, x as usize, img.get(ch, sy as usize, sx as usize));
            }
        }
    }
    out
}

/// Zero-pads by `m` and crops a window whose offset from centre satisfies
/// `|dx| + |dy| = m`, drawn uniformly from the `4m` integer offsets.
pub(super) fn cropshift<R: Rng + ?Sized>(img: &Image, m: usize, rng: &mut R) -> Image {
    if m == 0 {
        return img.clone();
    }
    let (dx, dy) = cropshift_offset(m as i64, rng.random_range(0..4 * m));
    shift(img, dx, dy)
}

/// The `k`-th of the `4m` offsets on the L1 sphere of radius `m`.
pub(super) fn cropshift_offset(m: i64, k: usize) -> (i64, i64) {
    // Walk dx from -m to m; interior dx values have two dy choices.
    let mut idx = k as i64;
    for dx in -m..=m {
        let r = m - dx.abs();
        let choices = if r == 0 { 1 } else { 2 };
        if idx < choices {
            return (dx, if idx == 0 { -r } else { r });
        }
        idx -= choices;
    }
    unreachable!("cropshift offset index {k} out of range for m={m}")
}

pub(super) fn translate(img: &Image, tx: i64, ty: i64) -> Image {
    // Content moves by (tx, ty).
    shift(img, -tx, -ty)
}

/// Nearest-neighbour inverse warp. `map` takes output pixel-centre coordinates
/// relative to the image centre and returns source coordinates, same frame.
fn warp(img: &Image, map: impl Fn(f32, f32) -> (f32, f32)) -> Image {
    let (c, h, w) = img.shape();
    let (cx, cy) = (w as f32 / 2.0, h as f32 / 2.0);
    let mut out = Image::filled(c, h, w, FILL_VALUE);
    for y in 0..h {
        for x in 0..w {
            let (u, v) = map(x as f32 + 0.5 - cx, y as f32 + 0.5 - cy);
            let sx = (u + cx).floor();
            let sy = (v + cy).floor();
            if sx < 0.0 || sy < 0.0 || sx >= w as f32 || sy >= h as f32 {
                continue;
            }
            for ch in 0..c {
                out.set(ch, y, x, img.get(ch, sy as usize, sx as usize));
            }
        }
    }
    out
}

/// Rotates content by `degrees` counter-clockwise about the centre.
pub(super) fn rotate(img: &Image, degrees: f32) -> Image {
    let (s, c) = degrees.to_radians().sin_cos();
    // y grows downward, so a visual counter-clockwise turn maps output back
    // to source with the matrix [[c, -s], [s, c]].
    warp(img, |x, y| (c * x - s * y, s * x + c * y))
}

pub(super) fn shear_x(img: &Image, factor: f32) -> Image {
    warp(img, |x, y| (x + factor * y, y))
}

pub(super) fn shear_y(img: &Image, factor: f32) -> Image {
    warp(img, |x, y| (x, y + factor * x))
}

fn map_levels(img: &Image, mut per_channel: impl FnMut(&mut [u8])) -> Image {
    let (c, h, w) = img.shape();
    let mut levels = img.levels();
    for ch in 0..c {
        per_channel(&mut levels[ch * h * w..(ch + 1) * h * w]);
    }
    Image::new(c, h, w, levels.into_iter().map(dequantize).collect()).expect("shape preserved")
}

/// Stretches each channel's level range to 0..=255 (channels with a single
/// level are left unchanged).
pub(super) fn autocontrast(img: &Image) -> Image {
    map_levels(img, |plane| {
        let lo = *plane.iter().min().unwrap_or(&0);
        let hi = *plane.iter().max().unwrap_or(&0);
        if hi <= lo {
            return;
        }
        let scale = 255.0 / (hi - lo) as f32;
        let offset = -(lo as f32) * scale;
        for v in plane.iter_mut() {
            *v = ((*v as f32) * scale + offset).clamp(0.0, 255.0) as u8;
        }
    })
}

/// Histogram equalisation per channel, following the common LUT construction.
pub(super) fn equalize(img: &Image) -> Image {
    map_levels(img, |plane| {
        let mut hist = [0usize; 256];
        for &v in plane.iter() {
            hist[v as usize] += 1;
        }
        let nonzero: Vec<usize> = hist.iter().copied().filter(|&n| n > 0).collect();
        if nonzero.len() <= 1 {
            return;
        }
        let last = *nonzero.last().expect("non-empty");
        let step = (plane.len() - last) / 255;
        if step == 0 {
            return;
        }
        let mut lut = [0u8; 256];
        let mut n = step / 2;
        for (i, slot) in lut.iter_mut().enumerate() {
            *slot = (n / step).min(255) as u8;
            n += hist[i];
        }
        for v in plane.iter_mut() {
            *v = lut[*v as usize];
        }
    })
}

/// Keeps the top `bits` bits of each level.
pub(super) fn posterize(img: &Image, bits: u32) -> Image {
    let bits = bits.min(8);
    let mask: u8 = if bits == 0 { 0 } else { 0xffu8 << (8 - bits) };
    map_levels(img, |plane| plane.iter_mut().for_each(|v| *v &= mask))
}

/// Inverts levels at or above `threshold`; a threshold of 256 is a no-op.
pub(super) fn solarize(img: &Image, threshold: u32) -> Image {
    map_levels(img, |plane| {
        for v in plane.iter_mut() {
            if *v as u32 >= threshold {
                *v = 255 - *v;
            }
        }
    })
}

fn blend(img: &Image, degenerate: &[f32], factor: f32) -> Image {
    let mut out = img.clone();
    for (o, d) in out.data_mut().iter_mut().zip(degenerate) {
        *o = (d + factor * (*o - d)).clamp(0.0, 1.0);
    }
    out
}

fn grayscale(img: &Image) -> Vec<f32> {
    let (c, h, w) = img.shape();
    if c == 1 {
        return img.data().to_vec();
    }
    let (r, g, b) = (img.plane(0), img.plane(1), img.plane(2));
    (0..h * w)
        .map(|i| 0.299 * r[i] + 0.587 * g[i] + 0.114 * b[i])
        .collect()
}

/// Saturation: blend with the grayscale image.
pub(super) fn color(img: &Image, factor: f32) -> Image {
    let (c, _, _) = img.shape();
    let gray = grayscale(img);
    let degenerate: Vec<f32> = (0..c).flat_map(|_| gray.iter().copied()).collect();
    blend(img, &degenerate, factor)
}

/// Blend with a constant image at the mean grayscale level.
pub(super) fn contrast(img: &Image, factor: f32) -> Image {
    let gray = grayscale(img);
    let mean = gray.iter().map(|&v| v as f64).sum::<f64>() / gray.len().max(1) as f64;
    let degenerate = vec![mean as f32; img.data().len()];
    blend(img, &degenerate, factor)
}

/// Blend with black.
pub(super) fn brightness(img: &Image, factor: f32) -> Image {
    let degenerate = vec![0.0; img.data().len()];
    blend(img, &degenerate, factor)
}

/// Blend with a smoothed copy (3x3 kernel, centre weight 5, others 1; border
/// pixels keep their original values).
pub(super) fn sharpness(img: &Image, factor: f32) -> Image {
    let (c, h, w) = img.shape();
    let mut degenerate = img.data().to_vec();
    if h >= 3 && w >= 3 {
        for ch in 0..c {
            for y in 1..h - 1 {
                for x in 1..w - 1 {
                    let mut acc = 0.0;
                    for dy in 0..3 {
                        for dx in 0..3 {
                            let wgt = if dy == 1 && dx == 1 { 5.0 } else { 1.0 };
                            acc += wgt * img.get(ch, y + dy - 1, x + dx - 1);
                        }
                    }
                    degenerate[(ch * h + y) * w + x] = acc / 13.0;
                }
            }
        }
    }
    blend(img, &degenerate, factor)
}

/// Erased rectangle `(top, left, height, width)` for an area fraction `scale`.
pub(super) fn erase_rect<R: Rng + ?Sized>(h: usize, w: usize, scale: f32, rng: &mut R) -> (usize, usize, usize, usize) {
    let area = scale * (h * w) as f32;
    let mut fallback = (1, 1);
    for attempt in 0..ERASE_ATTEMPTS {
        let ratio = rng.random_range(ERASE_ASPECT.0..ERASE_ASPECT.1);
        let eh = (area * ratio).sqrt().round() as usize;
        let ew = (area / ratio).sqrt().round() as usize;
        if attempt == 0 {
            fallback = (eh.clamp(1, h), ew.clamp(1, w));
        }
        if eh >= 1 && ew >= 1 && eh < h && ew < w {
            let top = rng.random_range(0..=h - eh);
            let left = rng.random_range(0..=w - ew);
            return (top, left, eh, ew);
        }
    }
    let (eh, ew) = fallback;
    (rng.random_range(0..=h - eh), rng.random_range(0..=w - ew), eh, ew)
}

/// Random erasing: a rectangle covering `scale` of the image area with a
/// random aspect ratio is filled with uniform noise.
pub(super) fn erase<R: Rng + ?Sized>(img: &Image, scale: f32, rng: &mut R) -> Image {
    let (c, h, w) = img.shape();
    let (top, left, eh, ew) = erase_rect(h, w, scale, rng);
    let mut out = img.clone();
    for ch in 0..c {
        for y in top..top + eh {
            for x in left..left + ew {
                out.set(ch, y, x, rng.random::<f32>());
            }
        }
    }
    out
}
