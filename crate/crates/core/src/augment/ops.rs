//! Image operations with a scalar magnitude `m` in `[0, 1]`.
//!
//! Each op provides its output, the derivative of the output w.r.t. `m`, and
//! the Jacobian-vector product w.r.t. its input so that derivatives can be
//! carried forward through a chain of ops.
//!
//! Magnitude maps (`f(m) = 1 + 1.8 (m - 0.5)`, so `f` spans `[0.1, 1.9]`):
//!
//! | op           | effect of `m`                                   | identity at |
//! |--------------|-------------------------------------------------|-------------|
//! | Brightness   | `f(m) * x`                                      | 0.5         |
//! | Color        | blend with per-pixel luma by `f(m)`             | 0.5         |
//! | Contrast     | blend with the image's mean luma by `f(m)`      | 0.5         |
//! | Sharpness    | blend with a 3x3 smoothed image by `f(m)`       | 0.5         |
//! | Solarize     | soft inversion above threshold `~1 - m`         | 0.0         |
//! | ShearX/Y     | shear `0.3 (2m - 1)` about the image center     | 0.5         |
//! | TranslateX/Y | shift `0.3 (2m - 1)` of the image extent        | 0.5         |
//! | Rotate       | `30 (2m - 1)` degrees about the center          | 0.5         |
//! | Posterize    | keep `8 - round(4m)` bits                       | 0.0         |
//! | AutoContrast | per-channel min/max stretch (ignores `m`)       | -           |
//! | Equalize     | per-channel histogram equalization (ignores `m`)| -           |
//! | Invert       | `1 - x` (ignores `m`)                           | -           |
//!
//! The last four are not differentiable in `m`; their magnitude derivative
//! is the straight-through estimate of one per pixel. AutoContrast, Equalize
//! and Posterize also pass input tangents through unchanged; Invert uses its
//! exact input Jacobian `-1`.
//!
//! Solarize uses a sigmoid of width 1/256 in place of the hard threshold so
//! that it has a usable magnitude derivative. Geometric ops resample
//! bilinearly and fill uncovered pixels with mid-gray.

use serde::{Deserialize, Serialize};

use super::resample::{self, Affine};
use crate::error::{Error, Result};
use crate::tensor::Image;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum OpKind {
    AutoContrast,
    Equalize,
    Invert,
    Solarize,
    Posterize,
    Contrast,
    Brightness,
    Color,
    ShearX,
    ShearY,
    TranslateX,
    TranslateY,
    Rotate,
    Sharpness,
}

/// Canonical registry order.
pub const ALL_OPS: [OpKind; 14] = [
    OpKind::AutoContrast,
    OpKind::Equalize,
    OpKind::Invert,
    OpKind::Solarize,
    OpKind::Posterize,
    OpKind::Contrast,
    OpKind::Brightness,
    OpKind::Color,
    OpKind::ShearX,
    OpKind::ShearY,
    OpKind::TranslateX,
    OpKind::TranslateY,
    OpKind::Rotate,
    OpKind::Sharpness,
];

const GEOMETRIC_FILL: f64 = 0.5;
const SHEAR_MAX: f64 = 0.3;
const TRANSLATE_MAX: f64 = 0.3;
const ROTATE_MAX_DEG: f64 = 30.0;
const ENHANCE_SPAN: f64 = 1.8;
const SOLARIZE_WIDTH: f64 = 1.0 / 256.0;
/// Threshold at `m = 0` sits this many widths above 1 so that the op is the
/// identity (to ~1e-7) there.
const SOLARIZE_MARGIN: f64 = 16.0 * SOLARIZE_WIDTH;

#[inline]
fn enhance_factor(m: f64) -> f64 {
    1.0 + ENHANCE_SPAN * (m - 0.5)
}

#[inline]
fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

impl OpKind {
    pub fn name(self) -> &'static str {
        match self {
            OpKind::AutoContrast => "AutoContrast",
            OpKind::Equalize => "Equalize",
            OpKind::Invert => "Invert",
            OpKind::Solarize => "Solarize",
            OpKind::Posterize => "Posterize",
            OpKind::Contrast => "Contrast",
            OpKind::Brightness => "Brightness",
            OpKind::Color => "Color",
            OpKind::ShearX => "ShearX",
            OpKind::ShearY => "ShearY",
            OpKind::TranslateX => "TranslateX",
            OpKind::TranslateY => "TranslateY",
            OpKind::Rotate => "Rotate",
            OpKind::Sharpness => "Sharpness",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        ALL_OPS
            .iter()
            .copied()
            .find(|op| op.name().eq_ignore_ascii_case(name))
            .ok_or_else(|| {
                let valid: Vec<_> = ALL_OPS.iter().map(|o| o.name()).collect();
                Error::Config(format!("unknown op `{name}`; valid ops: {}", valid.join(", ")))
            })
    }

    pub fn registry_index(self) -> usize {
        ALL_OPS.iter().position(|&o| o == self).expect("registered")
    }

    /// Whether the magnitude derivative is exact (otherwise straight-through).
    pub fn differentiable(self) -> bool {
        !matches!(
            self,
            OpKind::AutoContrast | OpKind::Equalize | OpKind::Invert | OpKind::Posterize
        )
    }

    /// Magnitude at which the op leaves every image unchanged, if any.
    pub fn identity_magnitude(self) -> Option<f64> {
        match self {
            OpKind::AutoContrast | OpKind::Equalize | OpKind::Invert => None,
            OpKind::Solarize | OpKind::Posterize => Some(0.0),
            _ => Some(0.5),
        }
    }

    fn affine(self, m: f64, h: usize, w: usize) -> Option<(Affine, Affine)> {
        let cx = (w as f64 - 1.0) / 2.0;
        let cy = (h as f64 - 1.0) / 2.0;
        let t = 2.0 * m - 1.0;
        Some(match self {
            OpKind::ShearX => {
                let s = SHEAR_MAX * t;
                let ds = 2.0 * SHEAR_MAX;
                ([1.0, s, -s * cy, 0.0, 1.0, 0.0], [0.0, ds, -ds * cy, 0.0, 0.0, 0.0])
            }
            OpKind::ShearY => {
                let s = SHEAR_MAX * t;
                let ds = 2.0 * SHEAR_MAX;
                ([1.0, 0.0, 0.0, s, 1.0, -s * cx], [0.0, 0.0, 0.0, ds, 0.0, -ds * cx])
            }
            OpKind::TranslateX => {
                let span = TRANSLATE_MAX * w as f64;
                ([1.0, 0.0, -span * t, 0.0, 1.0, 0.0], [0.0, 0.0, -2.0 * span, 0.0, 0.0, 0.0])
            }
            OpKind::TranslateY => {
                let span = TRANSLATE_MAX * h as f64;
                ([1.0, 0.0, 0.0, 0.0, 1.0, -span * t], [0.0, 0.0, 0.0, 0.0, 0.0, -2.0 * span])
            }
            OpKind::Rotate => {
                let theta = ROTATE_MAX_DEG.to_radians() * t;
                let dtheta = 2.0 * ROTATE_MAX_DEG.to_radians();
                let (s, c) = theta.sin_cos();
                (
                    [c, s, cx - c * cx - s * cy, -s, c, cy + s * cx - c * cy],
                    [
                        -s * dtheta,
                        c * dtheta,
                        (s * cx - c * cy) * dtheta,
                        -c * dtheta,
                        -s * dtheta,
                        (c * cx + s * cy) * dtheta,
                    ],
                )
            }
            _ => return None,
        })
    }

    /// The op's output.
    pub fn apply(self, x: &Image, m: f64) -> Image {
        match self {
            OpKind::AutoContrast => autocontrast(x),
            OpKind::Equalize => equalize(x),
            OpKind::Invert => map_pixels(x, |v| 1.0 - v),
            OpKind::Posterize => posterize(x, m),
            OpKind::Solarize => {
                let thr = (1.0 + SOLARIZE_MARGIN) * (1.0 - m);
                map_pixels(x, |v| {
                    let s = sigmoid((v - thr) / SOLARIZE_WIDTH);
                    v + s * (1.0 - 2.0 * v)
                })
            }
            OpKind::Brightness | OpKind::Color | OpKind::Contrast | OpKind::Sharpness => {
                let base = self.degenerate(x);
                let f = enhance_factor(m);
                let mut out = x.clone();
                for (o, b) in out.data.iter_mut().zip(&base.data) {
                    *o = (b + f * (*o - b)).clamp(0.0, 1.0);
                }
                out
            }
            _ => {
                let (map, _) = self.affine(m, x.height, x.width).expect("geometric op");
                resample::warp(x, &map, GEOMETRIC_FILL)
            }
        }
    }

    /// The image each enhancement op blends against. Linear in `x`.
    fn degenerate(self, x: &Image) -> Image {
        match self {
            OpKind::Brightness => Image::zeros(x.channels, x.height, x.width),
            OpKind::Color => {
                let luma = x.luma();
                let mut out = x.clone();
                for c in 0..x.channels {
                    out.plane_mut(c).copy_from_slice(&luma);
                }
                out
            }
            OpKind::Contrast => {
                let luma = x.luma();
                let mean = luma.iter().sum::<f64>() / luma.len() as f64;
                Image::filled(x.channels, x.height, x.width, mean)
            }
            OpKind::Sharpness => smooth(x),
            _ => unreachable!("not an enhancement op"),
        }
    }

    /// `d apply(x, m) / d m`; ones for straight-through ops.
    pub fn magnitude_derivative(self, x: &Image, m: f64) -> Image {
        match self {
            OpKind::AutoContrast | OpKind::Equalize | OpKind::Invert | OpKind::Posterize => {
                Image::filled(x.channels, x.height, x.width, 1.0)
            }
            OpKind::Solarize => {
                let thr = (1.0 + SOLARIZE_MARGIN) * (1.0 - m);
                map_pixels(x, |v| {
                    let s = sigmoid((v - thr) / SOLARIZE_WIDTH);
                    s * (1.0 - s) * (1.0 + SOLARIZE_MARGIN) / SOLARIZE_WIDTH * (1.0 - 2.0 * v)
                })
            }
            OpKind::Brightness | OpKind::Color | OpKind::Contrast | OpKind::Sharpness => {
                let base = self.degenerate(x);
                let f = enhance_factor(m);
                let mut out = x.clone();
                for (o, b) in out.data.iter_mut().zip(&base.data) {
                    let raw = b + f * (*o - b);
                    *o = if (0.0..=1.0).contains(&raw) { ENHANCE_SPAN * (*o - b) } else { 0.0 };
                }
                out
            }
            _ => {
                let (map, dmap) = self.affine(m, x.height, x.width).expect("geometric op");
                resample::warp_derivative(x, &map, &dmap, GEOMETRIC_FILL)
            }
        }
    }

    /// Jacobian of `apply(·, m)` at `x`, applied to the tangent `t`.
    pub fn input_jvp(self, x: &Image, m: f64, t: &Image) -> Image {
        match self {
            OpKind::AutoContrast | OpKind::Equalize | OpKind::Posterize => t.clone(),
            OpKind::Invert => map_pixels(t, |v| -v),
            OpKind::Solarize => {
                let thr = (1.0 + SOLARIZE_MARGIN) * (1.0 - m);
                let mut out = t.clone();
                for (o, v) in out.data.iter_mut().zip(&x.data) {
                    let s = sigmoid((v - thr) / SOLARIZE_WIDTH);
                    let ds = s * (1.0 - s) / SOLARIZE_WIDTH;
                    *o *= 1.0 - 2.0 * s + ds * (1.0 - 2.0 * v);
                }
                out
            }
            OpKind::Brightness | OpKind::Color | OpKind::Contrast | OpKind::Sharpness => {
                let base = self.degenerate(x);
                let tbase = self.degenerate(t);
                let f = enhance_factor(m);
                let mut out = t.clone();
                for (((o, xv), b), tb) in out.data.iter_mut().zip(&x.data).zip(&base.data).zip(&tbase.data) {
                    let raw = b + f * (xv - b);
                    *o = if (0.0..=1.0).contains(&raw) { tb + f * (*o - tb) } else { 0.0 };
                }
                out
            }
            _ => {
                let (map, _) = self.affine(m, x.height, x.width).expect("geometric op");
                resample::warp(t, &map, 0.0)
            }
        }
    }
}

fn map_pixels(x: &Image, f: impl Fn(f64) -> f64) -> Image {
    let mut out = x.clone();
    out.data.iter_mut().for_each(|v| *v = f(*v));
    out
}

/// PIL's SMOOTH filter (center weight 5, neighbors 1, normalized by 13) on
/// interior pixels; border pixels are copied.
fn smooth(x: &Image) -> Image {
    let (c, h, w) = x.shape();
    let mut out = x.clone();
    if h < 3 || w < 3 {
        return out;
    }
    for ch in 0..c {
        let src = x.plane(ch);
        let dst = out.plane_mut(ch);
        for y in 1..h - 1 {
            for xx in 1..w - 1 {
                let mut acc = 4.0 * src[y * w + xx];
                for dy in 0..3 {
                    for dx in 0..3 {
                        acc += src[(y + dy - 1) * w + xx + dx - 1];
                    }
                }
                dst[y * w + xx] = acc / 13.0;
            }
        }
    }
    out
}

#[inline]
fn to_level(v: f64) -> usize {
    (v.clamp(0.0, 1.0) * 255.0).round() as usize
}

fn autocontrast(x: &Image) -> Image {
    let mut out = x.clone();
    for c in 0..x.channels {
        let plane = out.plane_mut(c);
        let lo = plane.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = plane.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if hi > lo {
            plane.iter_mut().for_each(|v| *v = (*v - lo) / (hi - lo));
        }
    }
    out
}

/// Histogram equalization on 8-bit levels, following PIL's lookup table.
fn equalize(x: &Image) -> Image {
    let mut out = x.clone();
    for c in 0..x.channels {
        let plane = out.plane_mut(c);
        let mut hist = [0usize; 256];
        for &v in plane.iter() {
            hist[to_level(v)] += 1;
        }
        let last_nonzero = hist.iter().rposition(|&h| h > 0).map_or(0, |i| hist[i]);
        let step = (plane.len() - last_nonzero) / 255;
        if step == 0 {
            continue;
        }
        let mut lut = [0.0; 256];
        let mut n = step / 2;
        for (i, l) in lut.iter_mut().enumerate() {
            *l = (n / step).min(255) as f64 / 255.0;
            n += hist[i];
        }
        plane.iter_mut().for_each(|v| *v = lut[to_level(*v)]);
    }
    out
}

fn posterize(x: &Image, m: f64) -> Image {
    let bits = 8 - (4.0 * m.clamp(0.0, 1.0)).round() as u32;
    if bits >= 8 {
        return x.clone();
    }
    let mask = !((1u32 << (8 - bits)) - 1) & 0xff;
    map_pixels(x, |v| (to_level(v) as u32 & mask) as f64 / 255.0)
}

/// An image after a chain of ops together with its derivative w.r.t. each
/// op's magnitude.
#[derive(Clone, Debug, PartialEq)]
pub struct Augmented {
    pub image: Image,
    pub tangents: Vec<Image>,
}

/// Applies `ops` in order, carrying magnitude derivatives forward.
pub fn apply_chain(x: &Image, ops: &[OpKind], magnitudes: &[f64]) -> Augmented {
    let mut cur = x.clone();
    let mut tangents: Vec<Image> = Vec::with_capacity(ops.len());
    for (&op, &m) in ops.iter().zip(magnitudes) {
        let mut next: Vec<Image> = tangents.iter().map(|t| op.input_jvp(&cur, m, t)).collect();
        next.push(op.magnitude_derivative(&cur, m));
        tangents = next;
        cur = op.apply(&cur, m);
    }
    Augmented { image: cur, tangents }
}

/// Applies `ops` in order without derivatives.
pub fn apply_plain(x: &Image, ops: &[OpKind], magnitudes: &[f64]) -> Image {
    ops.iter()
        .zip(magnitudes)
        .fold(x.clone(), |img, (&op, &m)| op.apply(&img, m))
}
