use std::f32::consts::PI;

use crate::raster::Image;

/// 3 colour + (magnitude + 4 orientations) at two scales.
pub const CHANNELS: usize = 13;
pub const ORIENTATIONS: usize = 4;

/// Channel maps of one image at the shrunk resolution, plus a blurred copy
/// used by the self-similarity features.
#[derive(Clone, Debug)]
pub struct ChannelStack {
    image_width: usize,
    image_height: usize,
    width: usize,
    height: usize,
    shrink: usize,
    data: Vec<f32>,
    blurred: Vec<f32>,
}

impl ChannelStack {
    /// Size of the source image.
    pub fn image_size(&self) -> (usize, usize) {
        (self.image_width, self.image_height)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn shrink(&self) -> usize {
        self.shrink
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.width * self.height;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn blurred_channel(&self, c: usize) -> &[f32] {
        let n = self.width * self.height;
        &self.blurred[c * n..(c + 1) * n]
    }

    #[inline]
    pub(crate) fn at(&self, c: usize, x: usize, y: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub(crate) fn blurred_at(&self, c: usize, x: usize, y: usize) -> f32 {
        self.blurred[(c * self.height + y) * self.width + x]
    }
}

fn srgb_to_linear(v: u8) -> f32 {
    let c = v as f32 / 255.0;
    if c <= 0.04045 {
        c / 12.92
    } else {
        ((c + 0.055) / 1.055).powf(2.4)
    }
}

/// CIE L*u*v*, rescaled to roughly [0, 1] per channel.
fn luv(img: &Image) -> [Vec<f32>; 3] {
    let lin: Vec<f32> = (0..=255u8).map(srgb_to_linear).collect();
    let n = img.width() * img.height();
    let mut out = [vec![0.0; n], vec![0.0; n], vec![0.0; n]];
    let (un, vn) = (0.197_833, 0.468_331);
    for (i, px) in img.data().chunks_exact(3).enumerate() {
        let (r, g, b) = (lin[px[0] as usize], lin[px[1] as usize], lin[px[2] as usize]);
        let x = 0.412_453 * r + 0.357_580 * g + 0.180_423 * b;
        let y = 0.212_671 * r + 0.715_160 * g + 0.072_169 * b;
        let z = 0.019_334 * r + 0.119_193 * g + 0.950_227 * b;
        let l = if y > 0.008_856 {
            116.0 * y.cbrt() - 16.0
        } else {
            903.3 * y
        };
        let d = x + 15.0 * y + 3.0 * z;
        let (u, v) = if d > 1e-12 {
            (13.0 * l * (4.0 * x / d - un), 13.0 * l * (9.0 * y / d - vn))
        } else {
            (0.0, 0.0)
        };
        out[0][i] = l / 100.0;
        out[1][i] = (u + 88.0) / 270.0;
        out[2][i] = (v + 134.0) / 270.0;
    }
    out
}

/// Gradient magnitude and hard-binned orientation channels of a single plane.
///
/// Orientation bin 0 holds gradients along x (vertical edges), bin 2 along y.
fn gradient_channels(plane: &[f32], w: usize, h: usize) -> Vec<Vec<f32>> {
    let mut out = vec![vec![0.0f32; w * h]; 1 + ORIENTATIONS];
    for y in 0..h {
        let (ym, yp) = (y.saturating_sub(1), (y + 1).min(h - 1));
        for x in 0..w {
            let (xm, xp) = (x.saturating_sub(1), (x + 1).min(w - 1));
            let gx = (plane[y * w + xp] - plane[y * w + xm]) * 0.5;
            let gy = (plane[yp * w + x] - plane[ym * w + x]) * 0.5;
            let m = (gx * gx + gy * gy).sqrt();
            let i = y * w + x;
            out[0][i] = m;
            if m > 0.0 {
                let mut t = gy.atan2(gx);
                if t < 0.0 {
                    t += PI;
                }
                let bin = ((t / (PI / ORIENTATIONS as f32)).round() as usize) % ORIENTATIONS;
                out[1 + bin][i] = m;
            }
        }
    }
    out
}

/// 2×2 mean pooling (odd trailing row/column dropped).
fn pool2(plane: &[f32], w: usize, h: usize) -> Vec<f32> {
    let (w2, h2) = (w / 2, h / 2);
    let mut out = vec![0.0; w2 * h2];
    for y in 0..h2 {
        for x in 0..w2 {
            let a = plane[(2 * y) * w + 2 * x] + plane[(2 * y) * w + 2 * x + 1];
            let b = plane[(2 * y + 1) * w + 2 * x] + plane[(2 * y + 1) * w + 2 * x + 1];
            out[y * w2 + x] = (a + b) * 0.25;
        }
    }
    out
}

/// Nearest-neighbour ×2 upsampling to `w × h`.
fn upsample2(plane: &[f32], w2: usize, h2: usize, w: usize, h: usize) -> Vec<f32> {
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        let sy = (y / 2).min(h2 - 1);
        for x in 0..w {
            out[y * w + x] = plane[sy * w2 + (x / 2).min(w2 - 1)];
        }
    }
    out
}

/// Separable [1 2 3 2 1]/9 filter with replicated borders.
fn triangle_blur(plane: &[f32], w: usize, h: usize) -> Vec<f32> {
    const K: [f32; 5] = [1.0 / 9.0, 2.0 / 9.0, 3.0 / 9.0, 2.0 / 9.0, 1.0 / 9.0];
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = K
                .iter()
                .enumerate()
                .map(|(k, c)| c * plane[y * w + clamp(x as isize + k as isize - 2, w)])
                .sum();
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = K
                .iter()
                .enumerate()
                .map(|(k, c)| c * tmp[clamp(y as isize + k as isize - 2, h) * w + x])
                .sum();
        }
    }
    out
}

/// Colour and gradient channels, reduced by `shrink` (1 or 2).
///
/// Channel order: L, u, v; gradient magnitude and four orientations of L at
/// full resolution; the same five at half resolution.
pub fn compute_channels(img: &Image, shrink: usize) -> ChannelStack {
    assert!(shrink == 1 || shrink == 2, "shrink must be 1 or 2");
    let (w, h) = (img.width(), img.height());
    let [l, u, v] = luv(img);
    let half_l = pool2(&l, w, h);
    let (w2, h2) = (w / 2, h / 2);
    let coarse = gradient_channels(&half_l, w2, h2);
    let mut full: Vec<Vec<f32>> = vec![l, u, v];
    full.extend(gradient_channels(&full[0], w, h));

    let (ws, hs) = (w / shrink, h / shrink);
    let mut data = Vec::with_capacity(CHANNELS * ws * hs);
    for ch in &full {
        if shrink == 2 {
            data.extend(pool2(ch, w, h));
        } else {
            data.extend_from_slice(ch);
        }
    }
    for ch in &coarse {
        if shrink == 2 {
            data.extend_from_slice(ch);
        } else {
            data.extend(upsample2(ch, w2, h2, w, h));
        }
    }
    let blurred: Vec<f32> = data
        .chunks_exact(ws * hs)
        .flat_map(|ch| triangle_blur(ch, ws, hs))
        .collect();
    ChannelStack {
        image_width: w,
        image_height: h,
        width: ws,
        height: hs,
        shrink,
        data,
        blurred,
    }
}
