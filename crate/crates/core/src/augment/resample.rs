//! Bilinear resampling under an affine coordinate map.
//!
//! Pixel centers sit at integer coordinates. An output pixel `(ox, oy)`
//! reads the source at `(a[0]*ox + a[1]*oy + a[2], a[3]*ox + a[4]*oy + a[5])`.
//! Neighbors outside the image take a constant fill value, so the result is
//! continuous and piecewise bilinear in the source coordinates.

use crate::tensor::Image;

/// Inverse affine map from output to source pixel coordinates.
pub type Affine = [f64; 6];

pub const IDENTITY: Affine = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0];

#[inline]
fn tap(plane: &[f64], w: usize, h: usize, x: isize, y: isize, fill: f64) -> f64 {
    if x < 0 || y < 0 || x >= w as isize || y >= h as isize {
        fill
    } else {
        plane[y as usize * w + x as usize]
    }
}

/// Value and partial derivatives `(v, dv/dx, dv/dy)` at a source location.
#[inline]
pub fn bilinear(plane: &[f64], w: usize, h: usize, x: f64, y: f64, fill: f64) -> (f64, f64, f64) {
    let x0 = x.floor();
    let y0 = y.floor();
    let fx = x - x0;
    let fy = y - y0;
    let (xi, yi) = (x0 as isize, y0 as isize);
    let v00 = tap(plane, w, h, xi, yi, fill);
    let v10 = tap(plane, w, h, xi + 1, yi, fill);
    let v01 = tap(plane, w, h, xi, yi + 1, fill);
    let v11 = tap(plane, w, h, xi + 1, yi + 1, fill);
    let top = v00 + fx * (v10 - v00);
    let bot = v01 + fx * (v11 - v01);
    let v = top + fy * (bot - top);
    let dx = (1.0 - fy) * (v10 - v00) + fy * (v11 - v01);
    let dy = bot - top;
    (v, dx, dy)
}

#[inline]
fn source(a: &Affine, ox: f64, oy: f64) -> (f64, f64) {
    (a[0] * ox + a[1] * oy + a[2], a[3] * ox + a[4] * oy + a[5])
}

/// Resamples every channel of `img` through `map`.
pub fn warp(img: &Image, map: &Affine, fill: f64) -> Image {
    let (c, h, w) = img.shape();
    let mut out = Image::zeros(c, h, w);
    for ch in 0..c {
        let src = img.plane(ch);
        let dst = out.plane_mut(ch);
        for oy in 0..h {
            for ox in 0..w {
                let (sx, sy) = source(map, ox as f64, oy as f64);
                dst[oy * w + ox] = bilinear(src, w, h, sx, sy, fill).0;
            }
        }
    }
    out
}

/// Derivative of [`warp`] w.r.t. a scalar that moves the map by `dmap`
/// (the fill value is constant).
pub fn warp_derivative(img: &Image, map: &Affine, dmap: &Affine, fill: f64) -> Image {
    let (c, h, w) = img.shape();
    let mut out = Image::zeros(c, h, w);
    for ch in 0..c {
        let src = img.plane(ch);
        let dst = out.plane_mut(ch);
        for oy in 0..h {
            for ox in 0..w {
                let (fx, fy) = (ox as f64, oy as f64);
                let (sx, sy) = source(map, fx, fy);
                let (dsx, dsy) = source(dmap, fx, fy);
                let (_, gx, gy) = bilinear(src, w, h, sx, sy, fill);
                dst[oy * w + ox] = gx * dsx + gy * dsy;
            }
        }
    }
    out
}
