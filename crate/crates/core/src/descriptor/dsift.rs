use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::Image;

/// Dense gradient-histogram descriptor settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenseSiftConfig {
    /// Grid step in pixels.
    pub stride: usize,
    /// Side of the square patch described at each grid position.
    pub patch: usize,
    /// Spatial cells per side.
    pub cells: usize,
    /// Orientation bins per cell.
    pub bins: usize,
    /// Per-entry clamp applied after the first normalization (`None` disables).
    pub clamp: Option<f32>,
}

impl Default for DenseSiftConfig {
    fn default() -> Self {
        Self {
            stride: 4,
            patch: 16,
            cells: 4,
            bins: 8,
            clamp: Some(0.2),
        }
    }
}

impl DenseSiftConfig {
    pub fn dim(&self) -> usize {
        self.cells * self.cells * self.bins
    }

    pub fn validate(&self) -> Result<()> {
        if self.stride == 0 || self.patch == 0 || self.cells == 0 || self.bins == 0 {
            return Err(Error::InvalidArgument("descriptor sizes must be positive".into()));
        }
        if self.patch % self.cells != 0 {
            return Err(Error::InvalidArgument(format!(
                "patch {} not divisible into {} cells",
                self.patch, self.cells
            )));
        }
        Ok(())
    }

    /// Number of grid positions along an axis of length `len`.
    pub fn grid_len(&self, len: usize) -> usize {
        if len < self.patch {
            0
        } else {
            (len - self.patch) / self.stride + 1
        }
    }
}

/// Descriptors on a regular grid over the image interior.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalDescriptorField {
    pub width: usize,
    pub height: usize,
    pub patch: usize,
    pub dim: usize,
    /// Top-left corner of each described patch.
    pub positions: Vec<(u32, u32)>,
    /// Row-major `positions.len() × dim`.
    pub descriptors: Vec<f32>,
}

impl LocalDescriptorField {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn descriptor(&self, i: usize) -> &[f32] {
        &self.descriptors[i * self.dim..(i + 1) * self.dim]
    }

    /// Vertical centre of the patch at grid index `i`.
    pub fn center_y(&self, i: usize) -> f64 {
        self.positions[i].1 as f64 + self.patch as f64 / 2.0
    }
}

/// Spatial bilinear weights from patch coordinate to cell index.
fn cell_weights(patch: usize, cells: usize) -> Vec<[(usize, f32); 2]> {
    let cw = (patch / cells) as f32;
    (0..patch)
        .map(|u| {
            let f = (u as f32 + 0.5) / cw - 0.5;
            let lo = f.floor();
            let a = f - lo;
            let lo = lo as isize;
            let mut out = [(0usize, 0.0f32); 2];
            if lo >= 0 {
                out[0] = (lo as usize, 1.0 - a);
            }
            if ((lo + 1) as usize) < cells {
                out[1] = ((lo + 1) as usize, a);
            }
            out
        })
        .collect()
}

/// Dense descriptors: grey-level gradient orientation histograms over a
/// `cells × cells` grid per patch with bilinear spatial and orientation binning,
/// L2-normalized (then clamped and renormalized when configured).
pub fn dense_descriptors(img: &Image, cfg: &DenseSiftConfig) -> Result<LocalDescriptorField> {
    cfg.validate()?;
    let (w, h) = (img.width(), img.height());
    if w < cfg.patch || h < cfg.patch {
        return Err(Error::ImageTooSmall {
            width: w,
            height: h,
            min: cfg.patch,
        });
    }
    let luma = img.luma();
    let bins = cfg.bins;
    // Per-pixel orientation contributions: two (bin, weighted magnitude) pairs.
    let mut contrib = vec![(0u16, 0.0f32, 0.0f32); w * h];
    let two_pi = std::f32::consts::TAU;
    for y in 0..h {
        let ym = y.saturating_sub(1);
        let yp = (y + 1).min(h - 1);
        for x in 0..w {
            let xm = x.saturating_sub(1);
            let xp = (x + 1).min(w - 1);
            let gx = (luma[y * w + xp] - luma[y * w + xm]) * 0.5;
            let gy = (luma[yp * w + x] - luma[ym * w + x]) * 0.5;
            let mag = (gx * gx + gy * gy).sqrt();
            if mag == 0.0 {
                continue;
            }
            let mut theta = gy.atan2(gx);
            if theta < 0.0 {
                theta += two_pi;
            }
            let o = theta / two_pi * bins as f32;
            let b0 = (o.floor() as usize) % bins;
            let frac = o - o.floor();
            contrib[y * w + x] = (b0 as u16, mag * (1.0 - frac), mag * frac);
        }
    }

    let weights = cell_weights(cfg.patch, cfg.cells);
    let (gx_n, gy_n) = (cfg.grid_len(w), cfg.grid_len(h));
    let dim = cfg.dim();
    let mut positions = Vec::with_capacity(gx_n * gy_n);
    let mut descriptors = vec![0.0f32; gx_n * gy_n * dim];
    for gy in 0..gy_n {
        for gx in 0..gx_n {
            let (px, py) = (gx * cfg.stride, gy * cfg.stride);
            let idx = positions.len();
            positions.push((px as u32, py as u32));
            let d = &mut descriptors[idx * dim..(idx + 1) * dim];
            for v in 0..cfg.patch {
                let wy = weights[v];
                for u in 0..cfg.patch {
                    let (b0, m0, m1) = contrib[(py + v) * w + px + u];
                    if m0 == 0.0 && m1 == 0.0 {
                        continue;
                    }
                    let b0 = b0 as usize;
                    let b1 = (b0 + 1) % bins;
                    let wx = weights[u];
                    for &(cy, ay) in &wy {
                        if ay == 0.0 {
                            continue;
                        }
                        for &(cx, ax) in &wx {
                            if ax == 0.0 {
                                continue;
                            }
                            let base = (cy * cfg.cells + cx) * bins;
                            let a = ay * ax;
                            d[base + b0] += a * m0;
                            d[base + b1] += a * m1;
                        }
                    }
                }
            }
            normalize(d, cfg.clamp);
        }
    }
    Ok(LocalDescriptorField {
        width: w,
        height: h,
        patch: cfg.patch,
        dim,
        positions,
        descriptors,
    })
}

fn normalize(d: &mut [f32], clamp: Option<f32>) {
    let norm = d.iter().map(|v| v * v).sum::<f32>().sqrt();
    if norm <= f32::EPSILON {
        d.iter_mut().for_each(|v| *v = 0.0);
        return;
    }
    d.iter_mut().for_each(|v| *v /= norm);
    if let Some(c) = clamp {
        d.iter_mut().for_each(|v| *v = v.min(c));
        let n2 = d.iter().map(|v| v * v).sum::<f32>().sqrt();
        if n2 > 0.0 {
            d.iter_mut().for_each(|v| *v /= n2);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_image_gives_zero_descriptors() {
        let img = Image::from_fn(40, 36, |_, _| [90, 120, 30]);
        let f = dense_descriptors(&img, &DenseSiftConfig::default()).unwrap();
        assert_eq!(f.len(), 7 * 6);
        assert!(f.descriptors.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sixteen_pixel_image_has_one_position() {
        let img = Image::from_fn(16, 16, |x, _| [(x * 10) as u8; 3]);
        let f = dense_descriptors(&img, &DenseSiftConfig::default()).unwrap();
        assert_eq!(f.len(), 1);
        assert_eq!(f.positions[0], (0, 0));
        let norm: f32 = f.descriptor(0).iter().map(|v| v * v).sum::<f32>().sqrt();
        assert!((norm - 1.0).abs() < 1e-5);
    }

    #[test]
    fn too_small_rejected() {
        let img = Image::from_fn(15, 40, |_, _| [0; 3]);
        assert!(matches!(
            dense_descriptors(&img, &DenseSiftConfig::default()),
            Err(Error::ImageTooSmall { .. })
        ));
    }

    #[test]
    fn vertical_step_edge_dominated_by_zero_orientation_bin() {
        // Dark left half, bright right half: gradient points along +x,
        // orientation 0, which lands entirely in bin 0.
        let img = Image::from_fn(16, 16, |x, _| if x < 8 { [20; 3] } else { [220; 3] });
        let cfg = DenseSiftConfig {
            clamp: None,
            ..DenseSiftConfig::default()
        };
        let f = dense_descriptors(&img, &cfg).unwrap();
        let d = f.descriptor(0);
        let mut per_bin = [0.0f32; 8];
        for (i, v) in d.iter().enumerate() {
            per_bin[i % 8] += v;
        }
        assert!(per_bin[0] > 0.0);
        for b in 1..8 {
            assert_eq!(per_bin[b], 0.0, "bin {b}");
        }
    }

    #[test]
    fn clamp_bounds_entries() {
        let img = Image::from_fn(16, 16, |x, _| if x < 8 { [20; 3] } else { [220; 3] });
        let f = dense_descriptors(&img, &DenseSiftConfig::default()).unwrap();
        // After clamp + renormalization no entry exceeds the clamp by much
        // and the vector stays unit length.
        let norm: f32 = f.descriptor(0).iter().map(|v| v * v).sum::<f32>().sqrt();
        assert!((norm - 1.0).abs() < 1e-5);
    }
}
