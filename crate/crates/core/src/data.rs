//! Procedural style-transfer triplets.
//!
//! Content images are a few supersampled geometric shapes on a plain
//! background. Style images paint a 3-5 colour palette through a stripe,
//! checker or noise texture. The target remaps the content's luminance bands
//! onto the palette and mixes in the style texture.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::seed::derive_seed;

const SUPERSAMPLE: usize = 4;
const TARGET_PALETTE_WEIGHT: f64 = 0.7;
const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Triplet {
    pub content: Image,
    pub style: Image,
    pub target: Image,
    pub seed: u64,
    pub split: Split,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Texture {
    Stripes,
    Checker,
    Noise,
}

/// Palette sorted by luminance plus the texture that selects from it.
#[derive(Clone, Debug)]
pub struct StyleSpec {
    pub palette: Vec<[f64; 3]>,
    pub texture: Texture,
    /// Per-pixel palette index of the style image.
    pub index: Vec<usize>,
}

pub fn luminance(rgb: [f64; 3]) -> f64 {
    0.299 * rgb[0] + 0.587 * rgb[1] + 0.114 * rgb[2]
}

fn random_color(rng: &mut ChaCha8Rng) -> [f64; 3] {
    [rng.random(), rng.random(), rng.random()]
}

#[derive(Clone, Copy, Debug)]
enum Shape {
    Circle { cx: f64, cy: f64, r: f64 },
    Rect { x0: f64, y0: f64, x1: f64, y1: f64 },
    Triangle { p: [(f64, f64); 3] },
}

impl Shape {
    fn random(rng: &mut ChaCha8Rng) -> Self {
        let cx = rng.random_range(0.15..0.85);
        let cy = rng.random_range(0.15..0.85);
        let s = rng.random_range(0.15..0.35);
        match rng.random_range(0..3) {
            0 => Shape::Circle { cx, cy, r: s },
            1 => {
                let a = rng.random_range(0.5..1.5);
                Shape::Rect { x0: cx - s * a, y0: cy - s / a, x1: cx + s * a, y1: cy + s / a }
            }
            _ => {
                let t0 = rng.random_range(0.0..2.0 * PI);
                let p = [0.0, 2.0 * PI / 3.0, 4.0 * PI / 3.0].map(|o: f64| (cx + s * (t0 + o).cos(), cy + s * (t0 + o).sin()));
                Shape::Triangle { p }
            }
        }
    }

    fn contains(&self, x: f64, y: f64) -> bool {
        match *self {
            Shape::Circle { cx, cy, r } => (x - cx).powi(2) + (y - cy).powi(2) <= r * r,
            Shape::Rect { x0, y0, x1, y1 } => x >= x0 && x <= x1 && y >= y0 && y <= y1,
            Shape::Triangle { p } => {
                let side = |a: (f64, f64), b: (f64, f64)| (b.0 - a.0) * (y - a.1) - (b.1 - a.1) * (x - a.0);
                let (d0, d1, d2) = (side(p[0], p[1]), side(p[1], p[2]), side(p[2], p[0]));
                (d0 >= 0.0 && d1 >= 0.0 && d2 >= 0.0) || (d0 <= 0.0 && d1 <= 0.0 && d2 <= 0.0)
            }
        }
    }
}

/// 2-4 shapes over a plain background, 4x4 supersampled.
pub fn render_content(seed: u64, size: usize) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bg = random_color(&mut rng);
    let n = rng.random_range(2..=4);
    let shapes: Vec<(Shape, [f64; 3])> = (0..n).map(|_| (Shape::random(&mut rng), random_color(&mut rng))).collect();
    let mut img = Image::filled(size, size, bg);
    let ss = SUPERSAMPLE as f64;
    for py in 0..size {
        for px in 0..size {
            let mut acc = [0.0; 3];
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let x = (px as f64 + (sx as f64 + 0.5) / ss) / size as f64;
                    let y = (py as f64 + (sy as f64 + 0.5) / ss) / size as f64;
                    let c = shapes.iter().rev().find(|(s, _)| s.contains(x, y)).map_or(bg, |(_, c)| *c);
                    (0..3).for_each(|i| acc[i] += c[i]);
                }
            }
            img.set_pixel(py, px, acc.map(|v| v / (ss * ss)));
        }
    }
    img
}

pub fn style_spec(seed: u64, size: usize) -> StyleSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(3..=5);
    let mut palette: Vec<[f64; 3]> = (0..n).map(|_| random_color(&mut rng)).collect();
    palette.sort_by(|a, b| luminance(*a).total_cmp(&luminance(*b)));
    let texture = match rng.random_range(0..3) {
        0 => Texture::Stripes,
        1 => Texture::Checker,
        _ => Texture::Noise,
    };
    let s = size as f64;
    let field: Box<dyn Fn(usize, usize) -> f64> = match texture {
        Texture::Stripes => {
            let theta = rng.random_range(0.0..PI);
            let period = rng.random_range(3.0..8.0);
            Box::new(move |y, x| ((x as f64 * theta.cos() + y as f64 * theta.sin()) / period).rem_euclid(1.0))
        }
        Texture::Checker => {
            let period = rng.random_range(2..=5);
            let phase: Vec<f64> = (0..4).map(|_| rng.random()).collect();
            Box::new(move |y, x| phase[((y / period) % 2) * 2 + (x / period) % 2])
        }
        Texture::Noise => {
            let g = 4;
            let grid: Vec<f64> = (0..(g + 1) * (g + 1)).map(|_| rng.random()).collect();
            Box::new(move |y, x| {
                let fy = y as f64 / s * g as f64;
                let fx = x as f64 / s * g as f64;
                let (iy, ix) = (fy.floor() as usize, fx.floor() as usize);
                let (ty, tx) = (fy - iy as f64, fx - ix as f64);
                let at = |a: usize, b: usize| grid[a * (g + 1) + b];
                let top = at(iy, ix) * (1.0 - tx) + at(iy, ix + 1) * tx;
                let bot = at(iy + 1, ix) * (1.0 - tx) + at(iy + 1, ix + 1) * tx;
                (top * (1.0 - ty) + bot * ty).clamp(0.0, 0.999_999)
            })
        }
    };
    let index = (0..size * size)
        .map(|i| ((field(i / size, i % size) * n as f64) as usize).min(n - 1))
        .collect();
    StyleSpec { palette, texture, index }
}

pub fn render_style(spec: &StyleSpec, size: usize) -> Image {
    let data = spec.index.iter().flat_map(|&i| spec.palette[i]).collect();
    Image::new(size, size, data).expect("size matches")
}

/// Luminance-band palette remap of `content` mixed 0.7 / 0.3 with `style`.
pub fn stylize(content: &Image, style: &Image, palette: &[[f64; 3]]) -> Image {
    let n = palette.len();
    let mut out = content.clone();
    for y in 0..content.height {
        for x in 0..content.width {
            let band = ((luminance(content.pixel(y, x)) * n as f64) as usize).min(n - 1);
            let p = palette[band];
            let s = style.pixel(y, x);
            out.set_pixel(y, x, std::array::from_fn(|c| TARGET_PALETTE_WEIGHT * p[c] + (1.0 - TARGET_PALETTE_WEIGHT) * s[c]));
        }
    }
    out
}

/// The triplet for one seed; split assigned separately.
pub fn gen_triplet(seed: u64, size: usize, split: Split) -> Triplet {
    let content = render_content(derive_seed(&[seed, 1]), size);
    let spec = style_spec(derive_seed(&[seed, 2]), size);
    let style = render_style(&spec, size);
    let target = stylize(&content, &style, &spec.palette);
    // Stored at 8 bits so in-memory and on-disk datasets agree exactly.
    let q = |img: Image| Image::from_bytes(img.height, img.width, &img.to_bytes()).expect("same dims");
    Triplet { content: q(content), style: q(style), target: q(target), seed, split }
}

/// Number of validation items for `n` samples: 5%, rounded, and at least
/// one when there are two or more samples.
pub fn val_count(n: usize) -> usize {
    let v = (n * 5 + 50) / 100;
    if v == 0 && n >= 2 {
        1
    } else {
        v
    }
}

/// Split tag per index from a seeded shuffle.
pub fn assign_splits(n: usize, seed: u64) -> Vec<Split> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(&[seed, 0x5917])));
    let mut out = vec![Split::Train; n];
    for &i in &idx[..val_count(n)] {
        out[i] = Split::Val;
    }
    out
}

pub fn gen_triplets(n: usize, seed: u64, size: usize) -> Result<Vec<Triplet>> {
    if n == 0 {
        return Err(Error::Config("dataset needs at least one triplet".into()));
    }
    let splits = assign_splits(n, seed);
    Ok((0..n)
        .into_par_iter()
        .map(|i| gen_triplet(derive_seed(&[seed, i as u64]), size, splits[i]))
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestItem {
    pub index: usize,
    pub seed: u64,
    pub split: Split,
    pub content: String,
    pub style: String,
    pub target: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    pub seed: u64,
    pub image_size: usize,
    pub items: Vec<ManifestItem>,
}

fn create_dir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

/// Writes PPM images under `content/`, `style/`, `target/` and a
/// `manifest.json`.
pub fn write_dataset(dir: &Path, triplets: &[Triplet], seed: u64, size: usize) -> Result<Manifest> {
    for sub in ["content", "style", "target"] {
        create_dir(&dir.join(sub))?;
    }
    let mut items = Vec::with_capacity(triplets.len());
    for (i, t) in triplets.iter().enumerate() {
        let name = format!("{i:06}.ppm");
        let rel = |s: &str| format!("{s}/{name}");
        t.content.write_ppm(&dir.join(rel("content")))?;
        t.style.write_ppm(&dir.join(rel("style")))?;
        t.target.write_ppm(&dir.join(rel("target")))?;
        items.push(ManifestItem {
            index: i,
            seed: t.seed,
            split: t.split,
            content: rel("content"),
            style: rel("style"),
            target: rel("target"),
        });
    }
    let manifest = Manifest { version: MANIFEST_VERSION, seed, image_size: size, items };
    let path = dir.join("manifest.json");
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let m: Manifest = serde_json::from_str(&text).map_err(|e| Error::Json { path: path.clone(), source: e })?;
    if m.version != MANIFEST_VERSION {
        return Err(Error::Config(format!("{}: unsupported manifest version {}", path.display(), m.version)));
    }
    Ok(m)
}

/// Loads every triplet listed in the manifest, in manifest order.
pub fn read_dataset(dir: &Path) -> Result<Vec<Triplet>> {
    let m = read_manifest(dir)?;
    m.items
        .iter()
        .map(|it| {
            let load = |rel: &str| -> Result<Image> {
                let p: PathBuf = dir.join(rel);
                let img = Image::read_ppm(&p)?;
                if img.height != m.image_size || img.width != m.image_size {
                    return Err(Error::Image(format!("{}: expected {}x{}", p.display(), m.image_size, m.image_size)));
                }
                Ok(img)
            };
            Ok(Triplet {
                content: load(&it.content)?,
                style: load(&it.style)?,
                target: load(&it.target)?,
                seed: it.seed,
                split: it.split,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub enabled: bool,
    /// Content rotation is drawn from `{-deg, 0, +deg}`.
    pub rotation_deg: f64,
    /// Content brightness factor range.
    pub brightness: (f64, f64),
    /// Style crop keeps this fraction of the area before resizing back.
    pub crop_area: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            enabled: true,
            rotation_deg: 10.0,
            brightness: (0.8, 1.2),
            crop_area: 0.875,
        }
    }
}

fn bilinear(img: &Image, y: f64, x: f64) -> [f64; 3] {
    let cy = y.clamp(0.0, (img.height - 1) as f64);
    let cx = x.clamp(0.0, (img.width - 1) as f64);
    let (y0, x0) = (cy.floor() as usize, cx.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(img.height - 1), (x0 + 1).min(img.width - 1));
    let (ty, tx) = (cy - y0 as f64, cx - x0 as f64);
    let (a, b, c, d) = (img.pixel(y0, x0), img.pixel(y0, x1), img.pixel(y1, x0), img.pixel(y1, x1));
    std::array::from_fn(|i| (a[i] * (1.0 - tx) + b[i] * tx) * (1.0 - ty) + (c[i] * (1.0 - tx) + d[i] * tx) * ty)
}

/// Rotation about the centre, edge pixels replicated.
pub fn rotate(img: &Image, degrees: f64) -> Image {
    if degrees == 0.0 {
        return img.clone();
    }
    let (s, c) = degrees.to_radians().sin_cos();
    let cy = (img.height as f64 - 1.0) / 2.0;
    let cx = (img.width as f64 - 1.0) / 2.0;
    let mut out = img.clone();
    for y in 0..img.height {
        for x in 0..img.width {
            let (dy, dx) = (y as f64 - cy, x as f64 - cx);
            out.set_pixel(y, x, bilinear(img, cy + c * dy - s * dx, cx + s * dy + c * dx));
        }
    }
    out
}

/// Crop of side `side` at `(y0, x0)` resized back to the full size.
pub fn crop_resize(img: &Image, y0: f64, x0: f64, side: f64) -> Image {
    let mut out = img.clone();
    let scale = side / img.height as f64;
    for y in 0..img.height {
        for x in 0..img.width {
            let sy = y0 + (y as f64 + 0.5) * scale - 0.5;
            let sx = x0 + (x as f64 + 0.5) * scale - 0.5;
            out.set_pixel(y, x, bilinear(img, sy, sx));
        }
    }
    out
}

/// Augmented `(content, style)` pair; identity when disabled.
pub fn augment(t: &Triplet, config: &AugmentConfig, rng: &mut ChaCha8Rng) -> (Image, Image) {
    if !config.enabled {
        return (t.content.clone(), t.style.clone());
    }
    let deg = [-config.rotation_deg, 0.0, config.rotation_deg][rng.random_range(0..3)];
    let gain = rng.random_range(config.brightness.0..=config.brightness.1);
    let mut content = rotate(&t.content, deg);
    content.data.iter_mut().for_each(|v| *v *= gain);
    let content = content.clamp01();
    let s = t.style.height as f64;
    let side = s * config.crop_area.sqrt();
    let y0 = rng.random_range(0.0..=s - side);
    let x0 = rng.random_range(0.0..=s - side);
    (content, crop_resize(&t.style, y0, x0, side))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_sizes() {
        let s = assign_splits(1000, 3);
        assert_eq!(s.iter().filter(|&&x| x == Split::Val).count(), 50);
        assert_eq!(val_count(8), 1);
        assert_eq!(val_count(1), 0);
        assert_eq!(val_count(20), 1);
    }

    #[test]
    fn same_seed_same_triplet() {
        assert_eq!(gen_triplet(5, 16, Split::Train), gen_triplet(5, 16, Split::Train));
        assert_ne!(gen_triplet(5, 16, Split::Train).content, gen_triplet(6, 16, Split::Train).content);
    }

    #[test]
    fn constant_luminance_content_uses_one_band() {
        let spec = style_spec(9, 16);
        let style = render_style(&spec, 16);
        let content = Image::filled(16, 16, [0.5, 0.5, 0.5]);
        let t = stylize(&content, &style, &spec.palette);
        let band = ((luminance([0.5; 3]) * spec.palette.len() as f64) as usize).min(spec.palette.len() - 1);
        let p = spec.palette[band];
        for y in 0..16 {
            for x in 0..16 {
                let s = style.pixel(y, x);
                let got = t.pixel(y, x);
                for c in 0..3 {
                    assert!((got[c] - (0.7 * p[c] + 0.3 * s[c])).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn style_uses_palette_only() {
        let spec = style_spec(4, 16);
        assert!((3..=5).contains(&spec.palette.len()));
        let img = render_style(&spec, 16);
        for y in 0..16 {
            for x in 0..16 {
                assert!(spec.palette.contains(&img.pixel(y, x)));
            }
        }
    }

    #[test]
    fn disabled_augmentation_is_identity() {
        let t = gen_triplet(1, 16, Split::Train);
        let cfg = AugmentConfig { enabled: false, ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(augment(&t, &cfg, &mut rng), (t.content.clone(), t.style.clone()));
    }

    #[test]
    fn zero_rotation_and_full_crop_are_identity() {
        let t = gen_triplet(2, 16, Split::Train);
        assert_eq!(rotate(&t.content, 0.0), t.content);
        let c = crop_resize(&t.style, 0.0, 0.0, 16.0);
        assert!(c.data.iter().zip(&t.style.data).all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn dataset_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let ts = gen_triplets(5, 11, 16).unwrap();
        write_dataset(dir.path(), &ts, 11, 16).unwrap();
        let back = read_dataset(dir.path()).unwrap();
        assert_eq!(back.len(), 5);
        assert_eq!(ts, back);
    }
}
