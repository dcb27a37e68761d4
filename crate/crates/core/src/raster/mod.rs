//! Images, labeled segmentations and boundary maps, plus ground-truth
//! boundary extraction and morphological thinning.

mod io;
mod manifest;
mod thin;

use std::collections::BTreeMap;

use crate::error::{Error, Result};

pub use manifest::{load_manifest, DatasetManifest, ManifestEntry, Split};
pub use thin::{boundary_thin, thin_mask};

/// Smallest side length accepted for forest training and prediction.
pub const MIN_FOREST_SIDE: usize = 32;

/// 8-bit RGB raster, row-major, three interleaved channels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidArgument("image must be non-empty".into()));
        }
        if data.len() != width * height * 3 {
            return Err(Error::dims(width * height * 3, data.len()));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> [u8; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for y in 0..height {
            for x in 0..width {
                data.extend_from_slice(&f(x, y));
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// Luma in [0,1] using ITU-R 601 weights.
    pub fn luma(&self) -> Vec<f32> {
        self.data
            .chunks_exact(3)
            .map(|p| (0.299 * p[0] as f32 + 0.587 * p[1] as f32 + 0.114 * p[2] as f32) / 255.0)
            .collect()
    }

    pub fn ensure_min_side(&self, min: usize) -> Result<()> {
        if self.width < min || self.height < min {
            return Err(Error::ImageTooSmall {
                width: self.width,
                height: self.height,
                min,
            });
        }
        Ok(())
    }
}

/// Per-pixel segment and class labels. Segment 0 is background/unlabeled.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabeledSegmentation {
    width: usize,
    height: usize,
    segments: Vec<u32>,
    classes: Vec<u32>,
}

impl LabeledSegmentation {
    /// Builds a segmentation from per-pixel segment ids and a segment → class table.
    ///
    /// Every nonzero segment present must map to a nonzero class; segment 0
    /// always maps to class 0.
    pub fn new(
        width: usize,
        height: usize,
        segments: Vec<u32>,
        segment_classes: &BTreeMap<u32, u32>,
    ) -> Result<Self> {
        if segments.len() != width * height {
            return Err(Error::dims(width * height, segments.len()));
        }
        let mut classes = Vec::with_capacity(segments.len());
        for &s in &segments {
            if s == 0 {
                classes.push(0);
                continue;
            }
            match segment_classes.get(&s) {
                Some(&c) if c != 0 => classes.push(c),
                Some(_) => {
                    return Err(Error::InvalidArgument(format!(
                        "segment {s} maps to background class 0"
                    )))
                }
                None => {
                    return Err(Error::InvalidArgument(format!(
                        "segment {s} has no class mapping"
                    )))
                }
            }
        }
        Ok(Self {
            width,
            height,
            segments,
            classes,
        })
    }

    /// Segmentation where each segment id is also its class id.
    pub fn from_class_labels(width: usize, height: usize, labels: Vec<u32>) -> Result<Self> {
        let table = labels.iter().filter(|&&s| s != 0).map(|&s| (s, s)).collect();
        Self::new(width, height, labels, &table)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn segment(&self, x: usize, y: usize) -> u32 {
        self.segments[y * self.width + x]
    }

    #[inline]
    pub fn class(&self, x: usize, y: usize) -> u32 {
        self.classes[y * self.width + x]
    }

    pub fn segments(&self) -> &[u32] {
        &self.segments
    }

    pub fn classes(&self) -> &[u32] {
        &self.classes
    }

    /// Segment → class table for the segments present.
    pub fn segment_classes(&self) -> BTreeMap<u32, u32> {
        self.segments
            .iter()
            .zip(&self.classes)
            .filter(|(&s, _)| s != 0)
            .map(|(&s, &c)| (s, c))
            .collect()
    }
}

/// Per-pixel boundary probability in [0,1].
#[derive(Clone, Debug, PartialEq)]
pub struct BoundaryMap {
    width: usize,
    height: usize,
    values: Vec<f64>,
}

impl BoundaryMap {
    pub fn new(width: usize, height: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != width * height {
            return Err(Error::dims(width * height, values.len()));
        }
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidArgument(format!(
                "boundary value {v} outside [0,1]"
            )));
        }
        Ok(Self {
            width,
            height,
            values,
        })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            values: vec![0.0; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f64) -> Result<Self> {
        let mut values = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                values.push(f(x, y));
            }
        }
        Self::new(width, height, values)
    }

    pub(crate) fn from_mask(width: usize, height: usize, mask: &[bool]) -> Self {
        Self {
            width,
            height,
            values: mask.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn same_shape(&self, other: &BoundaryMap) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn is_binary(&self) -> bool {
        self.values.iter().all(|&v| v == 0.0 || v == 1.0)
    }

    /// Pixels with value ≥ `threshold`.
    pub fn mask_at(&self, threshold: f64) -> Vec<bool> {
        self.values.iter().map(|&v| v >= threshold).collect()
    }

    pub fn count_nonzero(&self) -> usize {
        self.values.iter().filter(|&&v| v > 0.0).count()
    }
}

/// Which segment transitions count as ground-truth boundaries.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GtMode {
    AllClasses,
    SingleClass(u32),
}

/// Binary ground-truth boundaries from a segmentation.
///
/// Transitions are taken over 4-neighbours and both pixels of a qualifying
/// transition are marked. Background-background contacts never qualify.
pub fn extract_gt_boundaries(seg: &LabeledSegmentation, mode: GtMode) -> BoundaryMap {
    let (w, h) = (seg.width, seg.height);
    let mut mask = vec![false; w * h];
    let qualifies = |a: usize, b: usize| -> bool {
        let (sa, sb) = (seg.segments[a], seg.segments[b]);
        if sa == sb || (sa == 0 && sb == 0) {
            return false;
        }
        match mode {
            GtMode::AllClasses => true,
            GtMode::SingleClass(c) => seg.classes[a] == c || seg.classes[b] == c,
        }
    };
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if x + 1 < w && qualifies(i, i + 1) {
                mask[i] = true;
                mask[i + 1] = true;
            }
            if y + 1 < h && qualifies(i, i + w) {
                mask[i] = true;
                mask[i + w] = true;
            }
        }
    }
    BoundaryMap::from_mask(w, h, &mask)
}
