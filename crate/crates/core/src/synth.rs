//! Synthetic corpus in which one class's interior texture reproduces another
//! class's silhouette contrast.
//!
//! Tones are fixed: dark `40`, light `215`, mid-grey `128`. A striped object
//! alternates dark and light bands on a mid-grey background, so its interior
//! stripe edges have exactly the dark/light contrast that plain dark objects
//! show against the light background.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{DatasetManifest, Image, LabeledSegmentation, ManifestEntry, Split};
use crate::util::{derive_seed, rng_from};

pub const DARK: f64 = 40.0;
pub const LIGHT: f64 = 215.0;
pub const MID: f64 = 128.0;
/// Minimum distance between an object and the image border.
pub const MARGIN: f64 = 18.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Texture {
    Plain,
    Striped,
    Dotted,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Background {
    Smooth,
    Cluttered,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeFamily {
    Ellipse,
    Polygon,
    /// Ellipse or polygon, chosen per image.
    Mixed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassSpec {
    pub name: String,
    pub texture: Texture,
    pub background: Background,
    #[serde(default = "mixed")]
    pub shape: ShapeFamily,
}

fn mixed() -> ShapeFamily {
    ShapeFamily::Mixed
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub classes: Vec<ClassSpec>,
    pub images_per_class: usize,
    pub width: usize,
    pub height: usize,
    /// Gaussian noise standard deviation on the [0, 1] intensity scale.
    pub noise: f64,
    pub seed: u64,
    #[serde(default = "default_train_fraction")]
    pub train_fraction: f64,
}

fn default_train_fraction() -> f64 {
    0.8
}

impl Default for SynthSpec {
    fn default() -> Self {
        let class = |name: &str, texture, background| ClassSpec {
            name: name.into(),
            texture,
            background,
            shape: ShapeFamily::Mixed,
        };
        Self {
            classes: vec![
                class("striped", Texture::Striped, Background::Smooth),
                class("plain", Texture::Plain, Background::Smooth),
                class("cluttered", Texture::Plain, Background::Cluttered),
                class("dotted", Texture::Dotted, Background::Smooth),
            ],
            images_per_class: 100,
            width: 128,
            height: 128,
            noise: 4.0 / 255.0,
            seed: 7,
            train_fraction: default_train_fraction(),
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes.len() < 2 {
            return Err(Error::InvalidArgument("a corpus needs at least two classes".into()));
        }
        let min = (4.0 * MARGIN) as usize + 12;
        if self.width < min || self.height < min {
            return Err(Error::InvalidArgument(format!("images must be at least {min}x{min}")));
        }
        if self.images_per_class == 0 {
            return Err(Error::InvalidArgument("images_per_class must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.train_fraction) || !(self.noise >= 0.0) {
            return Err(Error::InvalidArgument("train_fraction must be in [0, 1], noise ≥ 0".into()));
        }
        let names: BTreeSet<&str> = self.classes.iter().map(|c| c.name.as_str()).collect();
        if names.len() != self.classes.len() {
            return Err(Error::InvalidArgument("class names must be unique".into()));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let s: Self = serde_json::from_str(text)?;
        s.validate()?;
        Ok(s)
    }

    /// Number of training images per class.
    pub fn train_per_class(&self) -> usize {
        (self.images_per_class as f64 * self.train_fraction).round() as usize
    }
}

/// One rendered image with its exact segmentation.
#[derive(Clone, Debug)]
pub struct SynthSample {
    pub name: String,
    pub class_id: u32,
    pub split: Split,
    pub image: Image,
    pub seg: LabeledSegmentation,
    /// Pixels inside the object whose texture differs from the object's base tone
    /// across a 4-neighbour edge (stripe or dot edges).
    pub texture_edges: Vec<bool>,
}

enum Shape {
    Ellipse { cx: f64, cy: f64, rx: f64, ry: f64, angle: f64 },
    Polygon(Vec<(f64, f64)>),
}

impl Shape {
    fn contains(&self, x: f64, y: f64) -> bool {
        match self {
            Shape::Ellipse { cx, cy, rx, ry, angle } => {
                let (s, c) = angle.sin_cos();
                let (dx, dy) = (x - cx, y - cy);
                let u = (dx * c + dy * s) / rx;
                let v = (-dx * s + dy * c) / ry;
                u * u + v * v <= 1.0
            }
            Shape::Polygon(p) => (0..p.len()).all(|i| {
                let (a, b) = (p[i], p[(i + 1) % p.len()]);
                (b.0 - a.0) * (y - a.1) - (b.1 - a.1) * (x - a.0) >= 0.0
            }),
        }
    }
}

/// Counter-clockwise convex hull (monotone chain).
fn convex_hull(mut pts: Vec<(f64, f64)>) -> Vec<(f64, f64)> {
    pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    let cross = |o: (f64, f64), a: (f64, f64), b: (f64, f64)| (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0);
    let mut hull: Vec<(f64, f64)> = Vec::new();
    for pass in 0..2 {
        let start = hull.len();
        let iter: Box<dyn Iterator<Item = &(f64, f64)>> = if pass == 0 {
            Box::new(pts.iter())
        } else {
            Box::new(pts.iter().rev())
        };
        for &p in iter {
            while hull.len() >= start + 2 && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0 {
                hull.pop();
            }
            hull.push(p);
        }
        hull.pop();
    }
    hull
}

fn random_shape(rng: &mut ChaCha8Rng, family: ShapeFamily, w: usize, h: usize) -> Shape {
    let polygon = match family {
        ShapeFamily::Ellipse => false,
        ShapeFamily::Polygon => true,
        ShapeFamily::Mixed => rng.random_bool(0.5),
    };
    let (w, h) = (w as f64, h as f64);
    let max_r = ((w.min(h) - 2.0 * MARGIN) / 2.0).max(8.0);
    // Two size modes give within-class appearance clusters.
    let large = rng.random_bool(0.5);
    let (lo, hi) = if large { (0.75 * max_r, max_r) } else { (0.45 * max_r, 0.65 * max_r) };
    let rx = rng.random_range(lo..hi);
    let ry = rng.random_range(lo..hi);
    let r = rx.max(ry);
    let cx = rng.random_range(MARGIN + r..=w - MARGIN - r);
    let cy = rng.random_range(MARGIN + r..=h - MARGIN - r);
    if polygon {
        let n = rng.random_range(5..=8);
        let pts: Vec<(f64, f64)> = (0..n)
            .map(|i| {
                let t = (i as f64 + rng.random_range(0.0..0.6)) * std::f64::consts::TAU / n as f64;
                let rr = rng.random_range(0.8..1.0);
                (cx + rx * rr * t.cos(), cy + ry * rr * t.sin())
            })
            .collect();
        Shape::Polygon(convex_hull(pts))
    } else {
        Shape::Ellipse {
            cx,
            cy,
            rx,
            ry,
            angle: rng.random_range(0.0..std::f64::consts::PI),
        }
    }
}

fn render(spec: &SynthSpec, class: usize, index: usize) -> SynthSample {
    let cs = &spec.classes[class];
    let (w, h) = (spec.width, spec.height);
    let mut rng = rng_from(derive_seed(spec.seed, &[class as u64, index as u64]));
    let shape = random_shape(&mut rng, cs.shape, w, h);
    let bg_tone = if cs.texture == Texture::Striped { MID } else { LIGHT };
    let mut bg = vec![bg_tone; w * h];

    if cs.background == Background::Cluttered {
        for _ in 0..rng.random_range(3..=6) {
            let (bx, by) = (rng.random_range(0.0..w as f64), rng.random_range(0.0..h as f64));
            let t: f64 = rng.random_range(0.0..std::f64::consts::PI);
            let len = rng.random_range(20.0..60.0);
            let thick = rng.random_range(3.0..7.0);
            let (s, c) = t.sin_cos();
            for y in 0..h {
                for x in 0..w {
                    let (dx, dy) = (x as f64 - bx, y as f64 - by);
                    let along = dx * c + dy * s;
                    let across = -dx * s + dy * c;
                    if along.abs() <= len / 2.0 && across.abs() <= thick / 2.0 {
                        bg[y * w + x] = DARK;
                    }
                }
            }
        }
    }

    let stripe_w = rng.random_range(16.0..=24.0);
    let stripe_t: f64 = rng.random_range(0.0..std::f64::consts::PI);
    let stripe_phase = rng.random_range(0.0..stripe_w * 2.0);
    let dot_spacing = rng.random_range(11.0..14.0);
    let dot_r = rng.random_range(2.5..4.0);
    let dot_off = (rng.random_range(0.0..dot_spacing), rng.random_range(0.0..dot_spacing));
    let interior = |x: f64, y: f64| -> f64 {
        match cs.texture {
            Texture::Plain => DARK,
            Texture::Striped => {
                let (s, c) = stripe_t.sin_cos();
                let band = ((x * c + y * s + stripe_phase) / stripe_w).floor() as i64;
                if band.rem_euclid(2) == 0 {
                    DARK
                } else {
                    LIGHT
                }
            }
            Texture::Dotted => {
                let gx = ((x - dot_off.0) / dot_spacing).round() * dot_spacing + dot_off.0;
                let gy = ((y - dot_off.1) / dot_spacing).round() * dot_spacing + dot_off.1;
                if (x - gx).powi(2) + (y - gy).powi(2) <= dot_r * dot_r {
                    LIGHT
                } else {
                    DARK
                }
            }
        }
    };

    let noise = Normal::new(0.0, spec.noise * 255.0).expect("finite noise");
    let mut segs = vec![0u32; w * h];
    let mut tone = vec![0.0; w * h];
    let mut data = Vec::with_capacity(w * h * 3);
    for y in 0..h {
        for x in 0..w {
            let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
            let i = y * w + x;
            let v = if shape.contains(fx, fy) {
                segs[i] = 1;
                interior(fx, fy)
            } else {
                bg[i]
            };
            tone[i] = v;
            let g = (v + noise.sample(&mut rng)).round().clamp(0.0, 255.0) as u8;
            data.extend_from_slice(&[g, g, g]);
        }
    }
    let mut texture_edges = vec![false; w * h];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if segs[i] == 0 {
                continue;
            }
            let nb = [(x + 1, y), (x, y + 1), (x.wrapping_sub(1), y), (x, y.wrapping_sub(1))];
            texture_edges[i] = nb.iter().any(|&(nx, ny)| {
                nx < w && ny < h && segs[ny * w + nx] == 1 && tone[ny * w + nx] != tone[i]
            });
        }
    }
    let class_id = class as u32 + 1;
    let split = if index < spec.train_per_class() { Split::Train } else { Split::Test };
    SynthSample {
        name: format!("{}_{index:03}", cs.name),
        class_id,
        split,
        image: Image::new(w, h, data).expect("sized"),
        seg: LabeledSegmentation::new(w, h, segs, &BTreeMap::from([(1, class_id)])).expect("valid"),
        texture_edges,
    }
}

/// Renders the whole corpus in memory, class by class.
pub fn render_corpus(spec: &SynthSpec) -> Result<Vec<SynthSample>> {
    spec.validate()?;
    let jobs: Vec<(usize, usize)> = (0..spec.classes.len())
        .flat_map(|c| (0..spec.images_per_class).map(move |i| (c, i)))
        .collect();
    Ok(jobs.par_iter().map(|&(c, i)| render(spec, c, i)).collect())
}

/// Writes images, segmentations (with sidecars), `spec.json` and
/// `manifest.tsv` under `out_dir`; returns the manifest.
pub fn generate(spec: &SynthSpec, out_dir: impl AsRef<Path>) -> Result<DatasetManifest> {
    let out = out_dir.as_ref();
    let samples = render_corpus(spec)?;
    for sub in ["images", "segs"] {
        let d = out.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    samples.par_iter().try_for_each(|s| -> Result<()> {
        s.image.save_png(out.join("images").join(format!("{}.png", s.name)))?;
        s.seg.save_png(out.join("segs").join(format!("{}.png", s.name)))
    })?;
    let entries = samples
        .iter()
        .map(|s| ManifestEntry {
            image_path: PathBuf::from("images").join(format!("{}.png", s.name)),
            seg_path: PathBuf::from("segs").join(format!("{}.png", s.name)),
            class_labels: BTreeSet::from([s.class_id]),
            split: s.split,
        })
        .collect();
    let manifest = DatasetManifest::new(out, entries)?;
    let spec_path = out.join("spec.json");
    fs::write(&spec_path, serde_json::to_string_pretty(spec)? + "\n").map_err(|e| Error::io(&spec_path, e))?;
    manifest.save(out.join("manifest.tsv"))?;
    Ok(manifest)
}
