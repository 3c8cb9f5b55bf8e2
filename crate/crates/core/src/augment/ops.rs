//! Deterministic per-technique transforms with explicit parameters. The
//! random parameter draws live in the pipeline; everything here is pure.

use super::{AugError, Patch};

pub(crate) const MAX_VALUE: f32 = 255.0;

fn clip(v: f32) -> f32 {
    v.clamp(0.0, MAX_VALUE)
}

pub fn hflip(p: &Patch) -> Patch {
    let (c, h, w) = p.dims();
    Patch::from_fn(c, h, w, |ch, y, x| p.at(ch, y, w - 1 - x))
}

pub fn vflip(p: &Patch) -> Patch {
    let (c, h, w) = p.dims();
    Patch::from_fn(c, h, w, |ch, y, x| p.at(ch, h - 1 - y, x))
}

/// Counter-clockwise rotation by `k` quarter turns. Odd `k` swaps height and
/// width.
pub fn rot90(p: &Patch, k: u8) -> Patch {
    let (c, h, w) = p.dims();
    match k % 4 {
        0 => p.clone(),
        1 => Patch::from_fn(c, w, h, |ch, y, x| p.at(ch, x, w - 1 - y)),
        2 => Patch::from_fn(c, h, w, |ch, y, x| p.at(ch, h - 1 - y, w - 1 - x)),
        _ => Patch::from_fn(c, w, h, |ch, y, x| p.at(ch, h - 1 - x, y)),
    }
}

/// Bilinear sample at continuous pixel-center coordinates. Out-of-range
/// positions read `fill` when given, otherwise clamp to the border.
fn bilinear(p: &Patch, ch: usize, y: f64, x: f64, fill: Option<f32>) -> f32 {
    let (_, h, w) = p.dims();
    if let Some(f) = fill {
        if y < -0.5 || x < -0.5 || y > h as f64 - 0.5 || x > w as f64 - 0.5 {
            return f;
        }
    }
    let y = y.clamp(0.0, (h - 1) as f64);
    let x = x.clamp(0.0, (w - 1) as f64);
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (fy, fx) = ((y - y0 as f64) as f32, (x - x0 as f64) as f32);
    let top = p.at(ch, y0, x0) * (1.0 - fx) + p.at(ch, y0, x1) * fx;
    let bottom = p.at(ch, y1, x0) * (1.0 - fx) + p.at(ch, y1, x1) * fx;
    top * (1.0 - fy) + bottom * fy
}

/// Crop `[top, top + ch) x [left, left + cw)` resized to `out_h x out_w`
/// with half-pixel-aligned bilinear interpolation.
pub fn resized_crop(
    p: &Patch,
    top: usize,
    left: usize,
    crop_h: usize,
    crop_w: usize,
    out_h: usize,
    out_w: usize,
) -> Result<Patch, AugError> {
    let (c, h, w) = p.dims();
    if crop_h == 0
        || crop_w == 0
        || top + crop_h > h
        || left + crop_w > w
        || out_h == 0
        || out_w == 0
    {
        return Err(AugError::Param(format!(
            "crop {crop_h}x{crop_w}@({top},{left}) -> {out_h}x{out_w} on {h}x{w}"
        )));
    }
    let sy = crop_h as f64 / out_h as f64;
    let sx = crop_w as f64 / out_w as f64;
    let crop = p.sub_patch(top, left, crop_h, crop_w);
    Ok(Patch::from_fn(c, out_h, out_w, |ch, y, x| {
        let src_y = (y as f64 + 0.5) * sy - 0.5;
        let src_x = (x as f64 + 0.5) * sx - 0.5;
        bilinear(&crop, ch, src_y, src_x, None)
    }))
}

/// Adds `delta` (already in pixel units) to every value.
pub fn brightness(p: &Patch, delta: f32) -> Patch {
    p.map(|v| clip(v + delta))
}

/// Multiplies every value by `factor`.
pub fn contrast(p: &Patch, factor: f32) -> Patch {
    p.map(|v| clip(v * factor))
}

/// Separable Gaussian blur with reflected borders. `sigma <= 0` is identity.
pub fn gaussian_blur(p: &Patch, sigma: f64) -> Patch {
    if sigma <= 0.0 {
        return p.clone();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = kernel.iter().sum();
    let kernel: Vec<f32> = kernel.iter().map(|k| (k / norm) as f32).collect();
    convolve_separable(p, &kernel)
}

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - m }) as usize
}

fn convolve_separable(p: &Patch, kernel: &[f32]) -> Patch {
    let (c, h, w) = p.dims();
    let r = (kernel.len() / 2) as isize;
    let horizontal = Patch::from_fn(c, h, w, |ch, y, x| {
        kernel
            .iter()
            .enumerate()
            .map(|(k, &kv)| kv * p.at(ch, y, reflect(x as isize + k as isize - r, w)))
            .sum()
    });
    Patch::from_fn(c, h, w, |ch, y, x| {
        let v: f32 = kernel
            .iter()
            .enumerate()
            .map(|(k, &kv)| kv * horizontal.at(ch, reflect(y as isize + k as isize - r, h), x))
            .sum();
        clip(v)
    })
}

/// Unsharp mask: `x + alpha * (x - blur3x3(x))`.
pub fn sharpen(p: &Patch, alpha: f32) -> Patch {
    let blurred = convolve_separable(p, &[0.25, 0.5, 0.25]);
    let mut out = p.clone();
    for (o, b) in out.data_mut().iter_mut().zip(blurred.data()) {
        *o = clip(*o + alpha * (*o - b));
    }
    out
}

/// Adds per-value noise (already scaled) and clips.
pub fn add_noise(p: &Patch, noise: &[f32]) -> Result<Patch, AugError> {
    if noise.len() != p.data().len() {
        return Err(AugError::Param(format!(
            "noise length {} for patch of {}",
            noise.len(),
            p.data().len()
        )));
    }
    let mut out = p.clone();
    for (o, n) in out.data_mut().iter_mut().zip(noise) {
        *o = clip(*o + n);
    }
    Ok(out)
}

/// Inverts every value at or above `threshold`.
pub fn solarize(p: &Patch, threshold: f32) -> Patch {
    p.map(|v| if v >= threshold { MAX_VALUE - v } else { v })
}

/// Keeps the `bits` most significant bits of the 8-bit integer part.
pub fn posterize(p: &Patch, bits: u8) -> Result<Patch, AugError> {
    if !(1..=8).contains(&bits) {
        return Err(AugError::Param(format!(
            "posterize bits {bits} not in 1..=8"
        )));
    }
    let step = (1u32 << (8 - bits)) as f32;
    Ok(p.map(|v| (v.floor() / step).floor() * step))
}

/// Replaces every channel with the per-pixel channel mean.
pub fn grayscale(p: &Patch) -> Patch {
    let (c, h, w) = p.dims();
    let mut mean = vec![0.0f32; h * w];
    for ch in 0..c {
        for (m, v) in mean.iter_mut().zip(p.channel(ch)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= c as f32);
    Patch::from_fn(c, h, w, |_, y, x| mean[y * w + x])
}

/// Zeroes the rectangle `[top, top + hole_h) x [left, left + hole_w)` in
/// every channel.
pub fn cutout(p: &Patch, top: usize, left: usize, hole_h: usize, hole_w: usize) -> Patch {
    let (c, h, w) = p.dims();
    let mut out = p.clone();
    for ch in 0..c {
        for y in top..(top + hole_h).min(h) {
            for x in left..(left + hole_w).min(w) {
                *out.at_mut(ch, y, x) = 0.0;
            }
        }
    }
    out
}

/// Band boundaries splitting `n` pixels into `g` nearly equal parts.
pub(crate) fn bands(n: usize, g: usize) -> Vec<(usize, usize)> {
    (0..g).map(|i| (i * n / g, (i + 1) * n / g)).collect()
}

/// Moves grid cells: the cell at index `perm[i]` lands in slot `i`. Cells
/// are indexed row-major over a `grid x grid` tiling; only equal-sized
/// cells may be exchanged.
pub fn grid_shuffle(p: &Patch, grid: usize, perm: &[usize]) -> Result<Patch, AugError> {
    let (c, h, w) = p.dims();
    if grid == 0 || grid > h || grid > w {
        return Err(AugError::Param(format!("grid {grid} for {h}x{w} patch")));
    }
    let rows = bands(h, grid);
    let cols = bands(w, grid);
    let cells: Vec<(usize, usize, usize, usize)> = rows
        .iter()
        .flat_map(|&(y0, y1)| cols.iter().map(move |&(x0, x1)| (y0, y1 - y0, x0, x1 - x0)))
        .collect();
    let mut seen = vec![false; cells.len()];
    if perm.len() != cells.len()
        || perm
            .iter()
            .any(|&j| j >= cells.len() || std::mem::replace(&mut seen[j], true))
    {
        return Err(AugError::Param(
            "grid permutation is not a permutation".into(),
        ));
    }
    let mut out = p.clone();
    for (dst, &src) in perm.iter().enumerate() {
        let (dy, dh, dx, dw) = cells[dst];
        let (sy, sh, sx, sw) = cells[src];
        if (dh, dw) != (sh, sw) {
            return Err(AugError::Param(format!(
                "cells {src} and {dst} differ in size"
            )));
        }
        for ch in 0..c {
            for y in 0..dh {
                for x in 0..dw {
                    *out.at_mut(ch, dy + y, dx + x) = p.at(ch, sy + y, sx + x);
                }
            }
        }
    }
    Ok(out)
}

/// Horizontal shear by `angle_deg` about the patch center, bilinear, zero
/// fill.
pub fn shear(p: &Patch, angle_deg: f64) -> Patch {
    let (c, h, w) = p.dims();
    let t = angle_deg.to_radians().tan();
    let cy = (h as f64 - 1.0) / 2.0;
    Patch::from_fn(c, h, w, |ch, y, x| {
        let src_x = x as f64 - t * (y as f64 - cy);
        clip(bilinear(p, ch, y as f64, src_x, Some(0.0)))
    })
}

/// Integer shift by `(dy, dx)` pixels, zero fill.
pub fn translate(p: &Patch, dy: isize, dx: isize) -> Patch {
    let (c, h, w) = p.dims();
    Patch::from_fn(c, h, w, |ch, y, x| {
        let sy = y as isize - dy;
        let sx = x as isize - dx;
        if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
            0.0
        } else {
            p.at(ch, sy as usize, sx as usize)
        }
    })
}
