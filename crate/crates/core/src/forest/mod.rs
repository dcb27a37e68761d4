//! Structured edge forests: 32×32 input windows, 16×16 boundary-mask leaves.

mod channels;
mod features;
mod label;
mod tree;

use log::{debug, warn};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use channels::{compute_channels, ChannelStack, CHANNELS, ORIENTATIONS};
pub use features::{FeatureLayout, FEATURE_LAYOUT_VERSION, TARGET, TARGET_OFFSET, WINDOW};
pub use label::{
    bit, pair_vector, pixel_pairs, popcount, relabel, set_bit, structured_split_label, Bits256,
    SegPatch, PAIR_TESTS, TARGET_PIXELS,
};
pub use tree::{entropy, node_seed, train_tree, FeatureSource, Node, StructuredTarget, Tree, TreeConfig};

use crate::error::{Error, Result};
use crate::raster::{BoundaryMap, Image, LabeledSegmentation, MIN_FOREST_SIDE};
use crate::util::{derive_seed, rng_from};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForestConfig {
    pub trees: usize,
    pub tree: TreeConfig,
    /// Training patches per tree.
    pub budget: usize,
    /// Window step at prediction time, in pixels (a multiple of `shrink`).
    pub stride: usize,
    /// Channel downsampling factor (1 or 2).
    pub shrink: usize,
    pub seed: u64,
}

impl Default for ForestConfig {
    fn default() -> Self {
        Self {
            trees: 8,
            tree: TreeConfig::default(),
            budget: 25_000,
            stride: 2,
            shrink: 2,
            seed: 0,
        }
    }
}

impl ForestConfig {
    pub fn validate(&self) -> Result<()> {
        if self.trees == 0 {
            return Err(Error::InvalidArgument("a forest needs at least one tree".into()));
        }
        if self.shrink != 1 && self.shrink != 2 {
            return Err(Error::InvalidArgument(format!("shrink must be 1 or 2, got {}", self.shrink)));
        }
        if self.stride == 0 || self.stride % self.shrink != 0 {
            return Err(Error::InvalidArgument(format!(
                "stride {} must be a positive multiple of shrink {}",
                self.stride, self.shrink
            )));
        }
        if self.budget < self.tree.min_leaf.max(1) {
            return Err(Error::InvalidArgument(format!(
                "budget {} is below the minimum leaf size {}",
                self.budget, self.tree.min_leaf
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EdgeForest {
    pub config: ForestConfig,
    pub trees: Vec<Tree>,
}

/// One training image: its channels, segmentation and ground-truth boundaries.
#[derive(Clone, Copy)]
pub struct TrainingImage<'a> {
    pub channels: &'a ChannelStack,
    pub seg: &'a LabeledSegmentation,
    pub gt: &'a BoundaryMap,
}

/// A training window: top-left corner in image pixels plus its target.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PatchSample {
    pub image: u32,
    pub x0: u16,
    pub y0: u16,
    pub target: StructuredTarget,
}

/// Window corners whose target is centred on a boundary / non-boundary pixel.
struct Candidates {
    pos: Vec<(u16, u16)>,
    neg: Vec<(u16, u16)>,
}

fn window_corner(c: usize, len: usize, shrink: usize) -> Option<usize> {
    let x0 = c as isize - (WINDOW / 2 - 1) as isize;
    let x0 = x0.div_euclid(shrink as isize) * shrink as isize;
    (x0 >= 0 && x0 as usize + WINDOW <= len).then_some(x0 as usize)
}

fn candidates(img: &TrainingImage, shrink: usize) -> Candidates {
    let (w, h) = (img.gt.width(), img.gt.height());
    let mut c = Candidates {
        pos: Vec::new(),
        neg: Vec::new(),
    };
    for y in 0..h {
        let Some(y0) = window_corner(y, h, shrink) else { continue };
        for x in 0..w {
            let Some(x0) = window_corner(x, w, shrink) else { continue };
            if img.gt.get(x, y) > 0.0 {
                c.pos.push((x0 as u16, y0 as u16));
            } else {
                c.neg.push((x0 as u16, y0 as u16));
            }
        }
    }
    c
}

fn check_image(img: &TrainingImage, shrink: usize) -> Result<()> {
    let (w, h) = img.channels.image_size();
    if img.seg.width() != w || img.seg.height() != h || img.gt.width() != w || img.gt.height() != h {
        return Err(Error::dims(
            format!("{w}x{h}"),
            format!("segmentation {}x{}", img.seg.width(), img.seg.height()),
        ));
    }
    if w < MIN_FOREST_SIDE || h < MIN_FOREST_SIDE {
        return Err(Error::ImageTooSmall {
            width: w,
            height: h,
            min: MIN_FOREST_SIDE,
        });
    }
    if img.channels.shrink() != shrink {
        return Err(Error::InvalidArgument(format!(
            "channels computed with shrink {}, forest uses {shrink}",
            img.channels.shrink()
        )));
    }
    Ok(())
}

fn make_sample(images: &[TrainingImage], i: usize, x0: usize, y0: usize) -> PatchSample {
    let img = &images[i];
    let mut ids = [0u32; TARGET_PIXELS];
    let mut mask = [0u64; 4];
    for dy in 0..TARGET {
        for dx in 0..TARGET {
            let (x, y) = (x0 + TARGET_OFFSET + dx, y0 + TARGET_OFFSET + dy);
            ids[dy * TARGET + dx] = img.seg.segment(x, y);
            if img.gt.get(x, y) > 0.0 {
                set_bit(&mut mask, dy * TARGET + dx);
            }
        }
    }
    PatchSample {
        image: i as u32,
        x0: x0 as u16,
        y0: y0 as u16,
        target: StructuredTarget {
            seg: relabel(&ids),
            mask,
        },
    }
}

fn sample_with(
    images: &[TrainingImage],
    cands: &[Candidates],
    budget: usize,
    seed: u64,
) -> Result<Vec<PatchSample>> {
    if cands.iter().all(|c| c.pos.is_empty()) {
        return Err(Error::NoBoundaries(format!("{} training images", images.len())));
    }
    let m = images.len();
    let mut rng = rng_from(seed);
    let mut out = Vec::with_capacity(budget);
    for (i, c) in cands.iter().enumerate() {
        let n = budget / m + usize::from(i < budget % m);
        let mut n_pos = n / 2;
        if c.pos.is_empty() {
            warn!("training image {i} has no usable boundary pixels; sampling negatives only");
            n_pos = 0;
        } else if c.neg.is_empty() {
            n_pos = n;
        }
        for k in 0..n {
            let list = if k < n_pos { &c.pos } else { &c.neg };
            let (x0, y0) = list[rng.random_range(0..list.len())];
            out.push(make_sample(images, i, x0 as usize, y0 as usize));
        }
    }
    Ok(out)
}

/// Draws `budget` windows spread evenly over `images`, half of each image's
/// share centred on ground-truth boundary pixels (with replacement).
pub fn sample_patches(images: &[TrainingImage], budget: usize, shrink: usize, seed: u64) -> Result<Vec<PatchSample>> {
    if images.is_empty() {
        return Err(Error::InsufficientSamples { needed: 1, got: 0 });
    }
    for img in images {
        check_image(img, shrink)?;
    }
    let cands: Vec<Candidates> = images.par_iter().map(|img| candidates(img, shrink)).collect();
    sample_with(images, &cands, budget, seed)
}

struct PatchFeatures<'a> {
    images: &'a [TrainingImage<'a>],
    samples: &'a [PatchSample],
    layout: &'a FeatureLayout,
    shrink: usize,
}

impl FeatureSource for PatchFeatures<'_> {
    fn n_features(&self) -> usize {
        self.layout.len()
    }

    #[inline]
    fn value(&self, sample: usize, feature: usize) -> f32 {
        let s = &self.samples[sample];
        self.layout.value(
            self.images[s.image as usize].channels,
            feature,
            s.x0 as usize / self.shrink,
            s.y0 as usize / self.shrink,
        )
    }
}

/// Trains `cfg.trees` trees, each on its own `cfg.budget` sampled windows.
pub fn train_forest(images: &[TrainingImage], cfg: &ForestConfig) -> Result<EdgeForest> {
    cfg.validate()?;
    if images.is_empty() {
        return Err(Error::InsufficientSamples { needed: 1, got: 0 });
    }
    for img in images {
        check_image(img, cfg.shrink)?;
    }
    let cands: Vec<Candidates> = images.par_iter().map(|img| candidates(img, cfg.shrink)).collect();
    let layout = FeatureLayout::new(cfg.shrink);
    let trees = (0..cfg.trees)
        .into_par_iter()
        .map(|t| -> Result<Tree> {
            let tseed = derive_seed(cfg.seed, &[t as u64]);
            let samples = sample_with(images, &cands, cfg.budget, derive_seed(tseed, &[0x5A]))?;
            let targets: Vec<StructuredTarget> = samples.iter().map(|s| s.target.clone()).collect();
            let src = PatchFeatures {
                images,
                samples: &samples,
                layout: &layout,
                shrink: cfg.shrink,
            };
            let tree = train_tree(&src, &targets, &cfg.tree, derive_seed(tseed, &[0x7E]));
            debug!("tree {t}: {} nodes, depth {}", tree.nodes.len(), tree.depth());
            Ok(tree)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EdgeForest {
        config: cfg.clone(),
        trees,
    })
}

impl EdgeForest {
    pub fn predict(&self, img: &Image) -> Result<BoundaryMap> {
        img.ensure_min_side(MIN_FOREST_SIDE)?;
        self.predict_channels(&compute_channels(img, self.config.shrink))
    }

    /// Sliding-window prediction on precomputed channels.
    ///
    /// Every window votes each tree's leaf mask onto its central 16×16 area;
    /// a pixel's value is its vote count divided by (covering windows × trees).
    /// Pixels no window covers are 0.
    pub fn predict_channels(&self, ch: &ChannelStack) -> Result<BoundaryMap> {
        let (w, h) = ch.image_size();
        if w < MIN_FOREST_SIDE || h < MIN_FOREST_SIDE {
            return Err(Error::ImageTooSmall {
                width: w,
                height: h,
                min: MIN_FOREST_SIDE,
            });
        }
        if ch.shrink() != self.config.shrink {
            return Err(Error::InvalidArgument(format!(
                "channels computed with shrink {}, forest uses {}",
                ch.shrink(),
                self.config.shrink
            )));
        }
        let layout = FeatureLayout::new(self.config.shrink);
        let stride = self.config.stride;
        let shrink = self.config.shrink;
        let ys: Vec<usize> = (0..=h - WINDOW).step_by(stride).collect();
        let xs: Vec<usize> = (0..=w - WINDOW).step_by(stride).collect();

        // Each band of window rows accumulates into its own pixel rows; bands
        // are merged in order, and counts are integers, so the sum is exact.
        let bands: Vec<(usize, Vec<u32>, Vec<u32>)> = ys
            .par_chunks(8)
            .map(|band| {
                let top = band[0] + TARGET_OFFSET;
                let rows = band[band.len() - 1] - band[0] + TARGET;
                let mut votes = vec![0u32; rows * w];
                let mut cover = vec![0u32; rows * w];
                for &y0 in band {
                    for &x0 in &xs {
                        let (xs0, ys0) = (x0 / shrink, y0 / shrink);
                        let base = (y0 + TARGET_OFFSET - top) * w + x0 + TARGET_OFFSET;
                        for dy in 0..TARGET {
                            let row = base + dy * w;
                            cover[row..row + TARGET].iter_mut().for_each(|c| *c += 1);
                        }
                        for t in &self.trees {
                            let mask = t.leaf_mask(|f| layout.value(ch, f, xs0, ys0));
                            for (wi, &word) in mask.iter().enumerate() {
                                let mut word = word;
                                while word != 0 {
                                    let b = wi * 64 + word.trailing_zeros() as usize;
                                    votes[base + (b / TARGET) * w + b % TARGET] += 1;
                                    word &= word - 1;
                                }
                            }
                        }
                    }
                }
                (top, votes, cover)
            })
            .collect();
        let mut votes = vec![0u32; w * h];
        let mut cover = vec![0u32; w * h];
        for (top, v, c) in bands {
            let off = top * w;
            for (i, (a, b)) in v.iter().zip(&c).enumerate() {
                votes[off + i] += a;
                cover[off + i] += b;
            }
        }
        let nt = self.trees.len() as f64;
        let values = votes
            .iter()
            .zip(&cover)
            .map(|(&v, &c)| if c == 0 { 0.0 } else { v as f64 / (c as f64 * nt) })
            .collect();
        BoundaryMap::new(w, h, values)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::{extract_gt_boundaries, GtMode};
    use std::collections::BTreeMap;

    fn disk(w: usize, h: usize, r: f64) -> (Image, LabeledSegmentation) {
        let (cx, cy) = (w as f64 / 2.0, h as f64 / 2.0);
        let inside = |x: usize, y: usize| (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2) < r * r;
        let img = Image::from_fn(w, h, |x, y| if inside(x, y) { [40; 3] } else { [215; 3] });
        let segs: Vec<u32> = (0..w * h).map(|i| inside(i % w, i / w) as u32).collect();
        let seg = LabeledSegmentation::new(w, h, segs, &BTreeMap::from([(1, 1)])).unwrap();
        (img, seg)
    }

    fn constant_forest(mask: Bits256, stride: usize) -> EdgeForest {
        EdgeForest {
            config: ForestConfig {
                trees: 1,
                stride,
                ..ForestConfig::default()
            },
            trees: vec![Tree {
                nodes: vec![Node::Leaf { mask, count: 8 }],
            }],
        }
    }

    #[test]
    fn zero_leaves_predict_zero() {
        let (img, _) = disk(48, 40, 10.0);
        let m = constant_forest([0; 4], 2).predict(&img).unwrap();
        assert!(m.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn full_leaves_predict_one_where_covered() {
        let (img, _) = disk(48, 40, 10.0);
        let m = constant_forest([u64::MAX; 4], 2).predict(&img).unwrap();
        for y in 0..40 {
            for x in 0..48 {
                let covered = (8..40).contains(&x) && (8..32).contains(&y);
                assert_eq!(m.get(x, y), if covered { 1.0 } else { 0.0 }, "({x},{y})");
            }
        }
    }

    #[test]
    fn sampler_splits_budget_evenly() {
        let data: Vec<(Image, LabeledSegmentation)> = (0..10).map(|i| disk(64, 64, 12.0 + i as f64)).collect();
        let chans: Vec<ChannelStack> = data.iter().map(|(im, _)| compute_channels(im, 2)).collect();
        let gts: Vec<BoundaryMap> = data
            .iter()
            .map(|(_, s)| extract_gt_boundaries(s, GtMode::AllClasses))
            .collect();
        let imgs: Vec<TrainingImage> = (0..10)
            .map(|i| TrainingImage {
                channels: &chans[i],
                seg: &data[i].1,
                gt: &gts[i],
            })
            .collect();
        let s = sample_patches(&imgs, 1000, 2, 4).unwrap();
        assert_eq!(s.len(), 1000);
        for i in 0..10u32 {
            let mine: Vec<&PatchSample> = s.iter().filter(|p| p.image == i).collect();
            assert_eq!(mine.len(), 100);
            let pos = mine
                .iter()
                .filter(|p| {
                    let g = &gts[i as usize];
                    let c = (p.x0 as usize + 15, p.y0 as usize + 15);
                    g.get(c.0, c.1) > 0.0 || g.get(c.0 + 1, c.1) > 0.0 || g.get(c.0, c.1 + 1) > 0.0 || g.get(c.0 + 1, c.1 + 1) > 0.0
                })
                .count();
            assert!(pos >= 50, "{pos}");
        }
        assert_eq!(s, sample_patches(&imgs, 1000, 2, 4).unwrap());
    }
}
