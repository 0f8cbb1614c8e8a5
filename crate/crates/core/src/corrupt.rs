//! Synthetic image corruptions at five severities.
//!
//! | name           | parameter per severity 1..5                          |
//! |----------------|------------------------------------------------------|
//! | gaussian_noise | sigma 0.04, 0.06, 0.08, 0.09, 0.10                   |
//! | shot_noise     | photons per unit 500, 250, 100, 75, 50               |
//! | impulse_noise  | salt-and-pepper fraction 0.01, 0.02, 0.03, 0.05, 0.07|
//! | defocus_blur   | disk radius (px) 1.0, 1.5, 2.0, 2.5, 3.0             |
//! | motion_blur    | streak length (px) 3, 4, 5, 6, 7, random angle       |
//! | snow-like      | flake density 0.02 .. 0.10, haze 0.10 .. 0.30        |
//! | contrast       | contrast factor 0.75, 0.5, 0.4, 0.3, 0.15            |
//! | brightness     | added brightness 0.05, 0.1, 0.15, 0.2, 0.3           |
//! | pixelate       | resolution factor 0.95, 0.9, 0.85, 0.75, 0.65        |
//! | jpeg-like      | JPEG quality 80, 65, 58, 50, 40                      |
//!
//! Every image gets its own random stream derived from the seed and its
//! index, so a set can be corrupted in any order with the same result.

use std::io::Cursor;

use image::codecs::jpeg::JpegEncoder;
use image::{ImageReader, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::augment::resample::bilinear;
use crate::data::{self, ImageSet};
use crate::error::{Error, Result};
use crate::tensor::Image;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Corruption {
    #[serde(rename = "gaussian_noise")]
    GaussianNoise,
    #[serde(rename = "shot_noise")]
    ShotNoise,
    #[serde(rename = "impulse_noise")]
    ImpulseNoise,
    #[serde(rename = "defocus_blur")]
    DefocusBlur,
    #[serde(rename = "motion_blur")]
    MotionBlur,
    #[serde(rename = "snow-like")]
    Snow,
    #[serde(rename = "contrast")]
    Contrast,
    #[serde(rename = "brightness")]
    Brightness,
    #[serde(rename = "pixelate")]
    Pixelate,
    #[serde(rename = "jpeg-like")]
    Jpeg,
}

impl Corruption {
    pub const ALL: [Corruption; 10] = [
        Corruption::GaussianNoise,
        Corruption::ShotNoise,
        Corruption::ImpulseNoise,
        Corruption::DefocusBlur,
        Corruption::MotionBlur,
        Corruption::Snow,
        Corruption::Contrast,
        Corruption::Brightness,
        Corruption::Pixelate,
        Corruption::Jpeg,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Corruption::GaussianNoise => "gaussian_noise",
            Corruption::ShotNoise => "shot_noise",
            Corruption::ImpulseNoise => "impulse_noise",
            Corruption::DefocusBlur => "defocus_blur",
            Corruption::MotionBlur => "motion_blur",
            Corruption::Snow => "snow-like",
            Corruption::Contrast => "contrast",
            Corruption::Brightness => "brightness",
            Corruption::Pixelate => "pixelate",
            Corruption::Jpeg => "jpeg-like",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|c| c.name() == name).ok_or_else(|| {
            let names: Vec<_> = Self::ALL.iter().map(|c| c.name()).collect();
            Error::Config(format!("unknown corruption `{name}`; valid names: {}", names.join(", ")))
        })
    }

    /// Primary parameter at a severity in `1..=5`.
    pub fn parameter(self, severity: u8) -> f64 {
        let table: [f64; 5] = match self {
            Corruption::GaussianNoise => [0.04, 0.06, 0.08, 0.09, 0.10],
            Corruption::ShotNoise => [500.0, 250.0, 100.0, 75.0, 50.0],
            Corruption::ImpulseNoise => [0.01, 0.02, 0.03, 0.05, 0.07],
            Corruption::DefocusBlur => [1.0, 1.5, 2.0, 2.5, 3.0],
            Corruption::MotionBlur => [3.0, 4.0, 5.0, 6.0, 7.0],
            Corruption::Snow => [0.02, 0.04, 0.06, 0.08, 0.10],
            Corruption::Contrast => [0.75, 0.5, 0.4, 0.3, 0.15],
            Corruption::Brightness => [0.05, 0.1, 0.15, 0.2, 0.3],
            Corruption::Pixelate => [0.95, 0.9, 0.85, 0.75, 0.65],
            Corruption::Jpeg => [80.0, 65.0, 58.0, 50.0, 40.0],
        };
        table[severity as usize - 1]
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorruptionSpec {
    pub name: Corruption,
    pub severity: u8,
    pub seed: u64,
}

impl CorruptionSpec {
    pub fn new(name: &str, severity: u8, seed: u64) -> Result<Self> {
        let spec = Self {
            name: Corruption::from_name(name)?,
            severity,
            seed,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=5).contains(&self.severity) {
            return Err(Error::Config(format!("severity {} must be within 1..=5", self.severity)));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn digest(&self) -> String {
        data::sha256_hex(&serde_json::to_vec(self).expect("spec serializes"))
    }

    /// Corrupts one image; `index` selects its random stream.
    pub fn apply(&self, x: &Image, index: u64) -> Result<Image> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(index);
        let p = self.name.parameter(self.severity);
        let mut out = match self.name {
            Corruption::GaussianNoise => {
                let n = Normal::new(0.0, p).expect("positive sigma");
                map_pixels(x, |v| v + n.sample(&mut rng))
            }
            Corruption::ShotNoise => map_pixels(x, |v| {
                let lambda = (v.clamp(0.0, 1.0) * p).max(1e-9);
                Poisson::new(lambda).expect("positive rate").sample(&mut rng) / p
            }),
            Corruption::ImpulseNoise => map_pixels(x, |v| {
                let u: f64 = rng.gen();
                if u < p / 2.0 {
                    0.0
                } else if u < p {
                    1.0
                } else {
                    v
                }
            }),
            Corruption::DefocusBlur => convolve(x, &disk_kernel(p)),
            Corruption::MotionBlur => {
                let angle = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
                motion_blur(x, p, angle)
            }
            Corruption::Snow => snow(x, p, 0.1 + 2.5 * (p - 0.02), &mut rng),
            Corruption::Contrast => {
                let m = x.data.iter().sum::<f64>() / x.data.len() as f64;
                map_pixels(x, |v| (v - m) * p + m)
            }
            Corruption::Brightness => map_pixels(x, |v| v + p),
            Corruption::Pixelate => pixelate(x, p),
            Corruption::Jpeg => jpeg_round_trip(x, p as u8)?,
        };
        out.clamp01();
        Ok(out)
    }
}

fn map_pixels(x: &Image, mut f: impl FnMut(f64) -> f64) -> Image {
    let mut out = x.clone();
    out.data.iter_mut().for_each(|v| *v = f(*v));
    out
}

/// Normalized disk kernel, each tap weighted by its 4x4 supersampled coverage.
fn disk_kernel(radius: f64) -> Vec<(isize, isize, f64)> {
    let r = radius.ceil() as isize;
    let mut taps = Vec::new();
    for dy in -r..=r {
        for dx in -r..=r {
            let mut cov = 0.0;
            for sy in 0..4 {
                for sx in 0..4 {
                    let u = dx as f64 + (sx as f64 + 0.5) / 4.0 - 0.5;
                    let v = dy as f64 + (sy as f64 + 0.5) / 4.0 - 0.5;
                    if u * u + v * v <= radius * radius {
                        cov += 1.0 / 16.0;
                    }
                }
            }
            if cov > 0.0 {
                taps.push((dx, dy, cov));
            }
        }
    }
    let total: f64 = taps.iter().map(|t| t.2).sum();
    taps.iter().map(|&(x, y, w)| (x, y, w / total)).collect()
}

/// Convolution with edge replication.
fn convolve(x: &Image, taps: &[(isize, isize, f64)]) -> Image {
    let (c, h, w) = x.shape();
    let mut out = Image::zeros(c, h, w);
    for ch in 0..c {
        let src = x.plane(ch);
        let dst = out.plane_mut(ch);
        for y in 0..h as isize {
            for xx in 0..w as isize {
                let mut acc = 0.0;
                for &(dx, dy, wt) in taps {
                    let sx = (xx + dx).clamp(0, w as isize - 1) as usize;
                    let sy = (y + dy).clamp(0, h as isize - 1) as usize;
                    acc += wt * src[sy * w + sx];
                }
                dst[y as usize * w + xx as usize] = acc;
            }
        }
    }
    out
}

/// Average of bilinear samples along a centered streak.
fn motion_blur(x: &Image, length: f64, angle: f64) -> Image {
    let (c, h, w) = x.shape();
    let samples = (2.0 * length).ceil() as usize + 1;
    let (s, co) = angle.sin_cos();
    let offsets: Vec<(f64, f64)> = (0..samples)
        .map(|i| {
            let t = length * (i as f64 / (samples - 1) as f64 - 0.5);
            (t * co, t * s)
        })
        .collect();
    let mut out = Image::zeros(c, h, w);
    for ch in 0..c {
        let src = x.plane(ch);
        let dst = out.plane_mut(ch);
        for y in 0..h {
            for xx in 0..w {
                let mut acc = 0.0;
                for &(ox, oy) in &offsets {
                    let sx = (xx as f64 + ox).clamp(0.0, (w - 1) as f64);
                    let sy = (y as f64 + oy).clamp(0.0, (h - 1) as f64);
                    acc += bilinear(src, w, h, sx, sy, 0.0).0;
                }
                dst[y * w + xx] = acc / samples as f64;
            }
        }
    }
    out
}

/// Bright streaked flakes over a hazed image.
fn snow<R: Rng>(x: &Image, density: f64, haze: f64, rng: &mut R) -> Image {
    let (c, h, w) = x.shape();
    let mut flakes = Image::zeros(1, h, w);
    for v in flakes.data.iter_mut() {
        if rng.gen::<f64>() < density {
            *v = rng.gen_range(0.7..1.0);
        }
    }
    let angle = rng.gen_range(1.0..2.1);
    let streaks = motion_blur(&flakes, 4.0, angle);
    let mut out = x.clone();
    for ch in 0..c {
        for i in 0..h * w {
            let luma_lift = x.data[ch * h * w + i].max(0.5 + 0.5 * x.data[ch * h * w + i]);
            let base = (1.0 - haze) * x.data[ch * h * w + i] + haze * luma_lift;
            out.data[ch * h * w + i] = base + 2.0 * streaks.data[i];
        }
    }
    out
}

fn pixelate(x: &Image, factor: f64) -> Image {
    let (c, h, w) = x.shape();
    let sw = ((w as f64 * factor).round() as usize).max(1);
    let sh = ((h as f64 * factor).round() as usize).max(1);
    // Area-average downsample, then nearest-neighbor upsample.
    let mut small = Image::zeros(c, sh, sw);
    for ch in 0..c {
        let src = x.plane(ch);
        for sy in 0..sh {
            for sx in 0..sw {
                let (y0, y1) = (sy * h / sh, ((sy + 1) * h).div_ceil(sh));
                let (x0, x1) = (sx * w / sw, ((sx + 1) * w).div_ceil(sw));
                let mut acc = 0.0;
                for y in y0..y1 {
                    for xx in x0..x1 {
                        acc += src[y * w + xx];
                    }
                }
                let i = small.idx(ch, sy, sx);
                small.data[i] = acc / ((y1 - y0) * (x1 - x0)) as f64;
            }
        }
    }
    let mut out = Image::zeros(c, h, w);
    for ch in 0..c {
        for y in 0..h {
            for xx in 0..w {
                let v = small.get(ch, y * sh / h, xx * sw / w);
                let i = out.idx(ch, y, xx);
                out.data[i] = v;
            }
        }
    }
    out
}

fn jpeg_round_trip(x: &Image, quality: u8) -> Result<Image> {
    let (c, h, w) = x.shape();
    if c != 3 {
        return Err(Error::Shape(format!("JPEG needs 3 channels, got {c}")));
    }
    let mut rgb = RgbImage::new(w as u32, h as u32);
    for (px, py, p) in rgb.enumerate_pixels_mut() {
        let (xx, y) = (px as usize, py as usize);
        *p = image::Rgb([0, 1, 2].map(|ch| data::quantize(x.get(ch, y, xx))));
    }
    let mut buf = Vec::new();
    JpegEncoder::new_with_quality(&mut buf, quality)
        .encode_image(&rgb)
        .map_err(|e| Error::Codec(e.to_string()))?;
    let decoded = ImageReader::with_format(Cursor::new(buf), image::ImageFormat::Jpeg)
        .decode()
        .map_err(|e| Error::Codec(e.to_string()))?
        .to_rgb8();
    let mut out = Image::zeros(3, h, w);
    for (px, py, p) in decoded.enumerate_pixels() {
        for ch in 0..3 {
            let i = out.idx(ch, py as usize, px as usize);
            out.data[i] = p[ch] as f64 / 255.0;
        }
    }
    Ok(out)
}

/// Corrupted copy of a set. The result is quantized to the on-disk grid and
/// its metadata records the spec, its digest and the clean set's digest.
pub fn build_corrupted_set(clean: &ImageSet, spec: &CorruptionSpec) -> Result<ImageSet> {
    spec.validate()?;
    if clean.images.iter().any(|x| !x.in_unit_range()) {
        return Err(Error::Precondition("clean images must lie in [0, 1]".into()));
    }
    let images = clean
        .images
        .iter()
        .enumerate()
        .map(|(i, x)| spec.apply(x, i as u64))
        .collect::<Result<Vec<_>>>()?;
    let mut set = ImageSet::new(images, clean.labels.clone(), clean.num_classes)?.quantized();
    set.meta = serde_json::json!({
        "corruption": spec,
        "spec_sha256": spec.digest(),
        "clean_sha256": data::sha256_hex(&clean.payload()),
        "clean_meta": clean.meta,
    });
    Ok(set)
}
