//! Labeled image sets on disk and a synthetic ten-class shapes generator.
//!
//! A set is a directory with `images.bin` (8-bit samples, image-major, CHW
//! within an image) and `manifest.json` describing its shape, labels and the
//! SHA-256 of `images.bin`. Pixel values are stored as `round(255 x)` and
//! read back as `v / 255`, so a saved and reloaded set is exactly
//! reproducible.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Image;

pub const IMAGES_FILE: &str = "images.bin";
pub const MANIFEST_FILE: &str = "manifest.json";
const FORMAT: &str = "tta-imageset-v1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub count: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub labels: Vec<usize>,
    pub images_sha256: String,
    /// Free-form provenance (generator parameters, corruption spec).
    #[serde(default, skip_serializing_if = "serde_json::Value::is_null")]
    pub meta: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageSet {
    pub images: Vec<Image>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub meta: serde_json::Value,
}

pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

impl ImageSet {
    pub fn new(images: Vec<Image>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(Error::Shape(format!("{} images, {} labels", images.len(), labels.len())));
        }
        if let Some(first) = images.first() {
            if images.iter().any(|x| !x.same_shape(first)) {
                return Err(Error::Shape("images differ in shape".into()));
            }
        }
        if let Some(l) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Shape(format!("label {l} with {num_classes} classes")));
        }
        Ok(Self {
            images,
            labels,
            num_classes,
            meta: serde_json::Value::Null,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        self.images.first().map_or((0, 0, 0), Image::shape)
    }

    /// Serialized pixel payload.
    pub fn payload(&self) -> Vec<u8> {
        self.images.iter().flat_map(|x| x.data.iter().map(|&v| quantize(v))).collect()
    }

    /// Rounds every pixel to the stored 8-bit grid.
    pub fn quantized(mut self) -> Self {
        for x in &mut self.images {
            x.data.iter_mut().for_each(|v| *v = quantize(*v) as f64 / 255.0);
        }
        self
    }

    pub fn subset(&self, range: std::ops::Range<usize>) -> ImageSet {
        ImageSet {
            images: self.images[range.clone()].to_vec(),
            labels: self.labels[range].to_vec(),
            num_classes: self.num_classes,
            meta: self.meta.clone(),
        }
    }

    pub fn save(&self, dir: &Path) -> Result<Manifest> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let payload = self.payload();
        let (c, h, w) = self.shape();
        let manifest = Manifest {
            format: FORMAT.into(),
            count: self.len(),
            channels: c,
            height: h,
            width: w,
            num_classes: self.num_classes,
            labels: self.labels.clone(),
            images_sha256: sha256_hex(&payload),
            meta: self.meta.clone(),
        };
        let img_path = dir.join(IMAGES_FILE);
        std::fs::write(&img_path, &payload).map_err(|e| Error::io(&img_path, e))?;
        let man_path = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(&manifest)?;
        std::fs::write(&man_path, text).map_err(|e| Error::io(&man_path, e))?;
        Ok(manifest)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let man_path = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&man_path).map_err(|e| Error::io(&man_path, e))?;
        let m: Manifest = serde_json::from_str(&text)?;
        if m.format != FORMAT {
            return Err(Error::Codec(format!("unsupported image set format `{}`", m.format)));
        }
        let img_path = dir.join(IMAGES_FILE);
        let payload = std::fs::read(&img_path).map_err(|e| Error::io(&img_path, e))?;
        let per = m.channels * m.height * m.width;
        if payload.len() != per * m.count || m.labels.len() != m.count {
            return Err(Error::Codec(format!(
                "{}: expected {} images of {} bytes and as many labels",
                dir.display(),
                m.count,
                per
            )));
        }
        if sha256_hex(&payload) != m.images_sha256 {
            return Err(Error::Codec(format!("{}: image digest mismatch", img_path.display())));
        }
        let images = payload
            .chunks_exact(per.max(1))
            .take(m.count)
            .map(|chunk| {
                Image::from_vec(
                    m.channels,
                    m.height,
                    m.width,
                    chunk.iter().map(|&b| b as f64 / 255.0).collect(),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let mut set = ImageSet::new(images, m.labels, m.num_classes)?;
        set.meta = m.meta;
        Ok(set)
    }
}

/// Names of the ten synthetic classes, by label.
pub const SHAPE_CLASSES: [&str; 10] = [
    "disk",
    "square",
    "triangle",
    "hstripes",
    "vstripes",
    "plus",
    "ring",
    "dstripes",
    "checker",
    "cross",
];

/// Parameters of the synthetic generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapesConfig {
    pub size: usize,
    /// Standard deviation of the per-pixel background texture.
    pub texture: f64,
    /// Range of the foreground/background intensity difference.
    pub contrast: (f64, f64),
}

impl Default for ShapesConfig {
    fn default() -> Self {
        Self {
            size: 32,
            texture: 0.03,
            contrast: (0.2, 0.5),
        }
    }
}

/// Coverage of pixel `(x, y)` by the shape of `class`, in `[0, 1]`.
/// Coordinates are relative to the shape center and scaled by its radius.
fn coverage(class: usize, u: f64, v: f64, period: f64, angle: f64) -> f64 {
    let (s, c) = angle.sin_cos();
    let (ru, rv) = (c * u - s * v, s * u + c * v);
    let inside_disk = u * u + v * v <= 1.0;
    let stripe = |t: f64| if (t / period).rem_euclid(1.0) < 0.5 { 1.0 } else { 0.0 };
    let on = |b: bool| if b { 1.0 } else { 0.0 };
    match class {
        0 => on(inside_disk),
        1 => on(ru.abs() <= 0.8 && rv.abs() <= 0.8),
        2 => on(rv <= 0.7 && rv >= -0.9 + 1.6 * ru.abs() * 1.1),
        3 => on(u.abs() <= 1.0 && v.abs() <= 1.0) * stripe(v),
        4 => on(u.abs() <= 1.0 && v.abs() <= 1.0) * stripe(u),
        5 => on((ru.abs() <= 0.25 && rv.abs() <= 1.0) || (rv.abs() <= 0.25 && ru.abs() <= 1.0)),
        6 => on((0.55..=1.0).contains(&(u * u + v * v).sqrt())),
        7 => on(u.abs() <= 1.0 && v.abs() <= 1.0) * stripe((u + v) / std::f64::consts::SQRT_2),
        8 => {
            let a = (u / period).floor() as i64 + (v / period).floor() as i64;
            on(u.abs() <= 1.0 && v.abs() <= 1.0 && a.rem_euclid(2) == 0)
        }
        9 => {
            let d1 = (u - v).abs() / std::f64::consts::SQRT_2;
            let d2 = (u + v).abs() / std::f64::consts::SQRT_2;
            on((d1 <= 0.2 || d2 <= 0.2) && u.abs() <= 1.0 && v.abs() <= 1.0)
        }
        _ => 0.0,
    }
}

/// Draws one image of the given class.
pub fn render_shape<R: Rng + ?Sized>(class: usize, cfg: &ShapesConfig, rng: &mut R) -> Image {
    let n = cfg.size;
    let nf = n as f64;
    let bg: [f64; 3] = [rng.gen_range(0.2..0.8), rng.gen_range(0.2..0.8), rng.gen_range(0.2..0.8)];
    let (lo, hi) = cfg.contrast;
    let diff = if hi > lo { rng.gen_range(lo..hi) } else { lo };
    let sign = if rng.gen::<bool>() { 1.0 } else { -1.0 };
    let fg = bg.map(|b| b + sign * diff);
    let radius = nf * rng.gen_range(0.28..0.42);
    let cx = nf / 2.0 + rng.gen_range(-0.12..0.12) * nf;
    let cy = nf / 2.0 + rng.gen_range(-0.12..0.12) * nf;
    let period = rng.gen_range(0.35..0.5);
    let angle = rng.gen_range(-0.3..0.3);
    let noise = Normal::new(0.0, cfg.texture.max(1e-12)).expect("valid std");
    let mut img = Image::zeros(3, n, n);
    // 2x2 supersampling for soft edges.
    for y in 0..n {
        for x in 0..n {
            let mut cov = 0.0;
            for (dx, dy) in [(0.25, 0.25), (0.75, 0.25), (0.25, 0.75), (0.75, 0.75)] {
                let u = (x as f64 + dx - cx) / radius;
                let v = (y as f64 + dy - cy) / radius;
                cov += 0.25 * coverage(class, u, v, period, angle);
            }
            let tex = if cfg.texture > 0.0 { noise.sample(rng) } else { 0.0 };
            for ch in 0..3 {
                let val = bg[ch] + cov * (fg[ch] - bg[ch]) + tex;
                let i = img.idx(ch, y, x);
                img.data[i] = val.clamp(0.0, 1.0);
            }
        }
    }
    img
}

/// `count` images with labels cycling through the classes in a shuffled
/// order, quantized to the on-disk grid.
pub fn synthetic_shapes(count: usize, seed: u64, cfg: &ShapesConfig) -> ImageSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut labels: Vec<usize> = (0..count).map(|i| i % SHAPE_CLASSES.len()).collect();
    rand::seq::SliceRandom::shuffle(labels.as_mut_slice(), &mut rng);
    let images = labels.iter().map(|&c| render_shape(c, cfg, &mut rng)).collect();
    let mut set = ImageSet::new(images, labels, SHAPE_CLASSES.len())
        .expect("generated labels are in range")
        .quantized();
    set.meta = serde_json::json!({
        "generator": "shapes",
        "seed": seed,
        "size": cfg.size,
        "texture": cfg.texture,
        "contrast": [cfg.contrast.0, cfg.contrast.1],
    });
    set
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn save_load_round_trip() {
        let set = synthetic_shapes(12, 3, &ShapesConfig::default());
        let dir = tempfile::tempdir().unwrap();
        let manifest = set.save(dir.path()).unwrap();
        assert_eq!(manifest.count, 12);
        let back = ImageSet::load(dir.path()).unwrap();
        assert_eq!(back, set);
    }

    #[test]
    fn corrupted_payload_is_rejected() {
        let set = synthetic_shapes(4, 1, &ShapesConfig::default());
        let dir = tempfile::tempdir().unwrap();
        set.save(dir.path()).unwrap();
        let p = dir.path().join(IMAGES_FILE);
        let mut bytes = std::fs::read(&p).unwrap();
        bytes[7] ^= 1;
        std::fs::write(&p, bytes).unwrap();
        assert!(matches!(ImageSet::load(dir.path()), Err(Error::Codec(_))));
    }

    #[test]
    fn generator_is_deterministic_and_balanced() {
        let a = synthetic_shapes(50, 9, &ShapesConfig::default());
        let b = synthetic_shapes(50, 9, &ShapesConfig::default());
        assert_eq!(a, b);
        for c in 0..10 {
            assert_eq!(a.labels.iter().filter(|&&l| l == c).count(), 5);
        }
        assert!(a.images.iter().all(|x| x.in_unit_range() && x.shape() == (3, 32, 32)));
        assert_ne!(a, synthetic_shapes(50, 10, &ShapesConfig::default()));
    }

    #[test]
    fn classes_are_visually_distinct() {
        let cfg = ShapesConfig {
            texture: 0.0,
            ..Default::default()
        };
        let masks: Vec<Vec<f64>> = (0..10)
            .map(|c| {
                (0..32 * 32)
                    .map(|i| coverage(c, (i % 32) as f64 / 10.0 - 1.6, (i / 32) as f64 / 10.0 - 1.6, 0.4, 0.0))
                    .collect()
            })
            .collect();
        for a in 0..10 {
            assert!(masks[a].iter().sum::<f64>() > 20.0, "class {a} is nearly empty");
            for b in a + 1..10 {
                let diff: f64 = masks[a].iter().zip(&masks[b]).map(|(x, y)| (x - y).abs()).sum();
                assert!(diff > 20.0, "classes {a} and {b} overlap");
            }
        }
        let _ = render_shape(0, &cfg, &mut ChaCha8Rng::seed_from_u64(0));
    }
}
