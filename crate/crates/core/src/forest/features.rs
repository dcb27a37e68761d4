use super::channels::{ChannelStack, CHANNELS};

/// Bumped whenever the meaning of a feature index changes.
pub const FEATURE_LAYOUT_VERSION: u32 = 1;

/// Input window side in image pixels.
pub const WINDOW: usize = 32;
/// Output (target) window side in image pixels.
pub const TARGET: usize = 16;
/// Offset of the target window inside the input window.
pub const TARGET_OFFSET: usize = (WINDOW - TARGET) / 2;

const GRID: usize = 5;
const SIM_PAIRS: usize = GRID * GRID * (GRID * GRID - 1) / 2;

/// Feature indexing for one shrink factor.
///
/// Indices `0..C·s²` are channel values over the `s × s` shrunk window
/// (channel-major, then row, then column). The remaining `C·300` indices are
/// differences between all pairs of a 5×5 grid sampled from the blurred
/// channels (channel-major, pairs in lexicographic order).
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureLayout {
    side: usize,
    grid: [usize; GRID],
    pairs: Vec<(u16, u16)>,
}

impl FeatureLayout {
    pub fn new(shrink: usize) -> Self {
        let side = WINDOW / shrink;
        let mut grid = [0; GRID];
        for (i, g) in grid.iter_mut().enumerate() {
            *g = 1 + ((i * (side - 3)) as f64 / (GRID - 1) as f64).round() as usize;
        }
        let mut pairs = Vec::with_capacity(SIM_PAIRS);
        for a in 0..GRID * GRID {
            for b in a + 1..GRID * GRID {
                pairs.push((a as u16, b as u16));
            }
        }
        Self { side, grid, pairs }
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn direct_len(&self) -> usize {
        CHANNELS * self.side * self.side
    }

    pub fn len(&self) -> usize {
        self.direct_len() + CHANNELS * SIM_PAIRS
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Value of feature `f` for the window whose shrunk top-left corner is (`xs`, `ys`).
    #[inline]
    pub fn value(&self, s: &ChannelStack, f: usize, xs: usize, ys: usize) -> f32 {
        let direct = self.direct_len();
        if f < direct {
            let plane = self.side * self.side;
            let c = f / plane;
            let r = f % plane;
            s.at(c, xs + r % self.side, ys + r / self.side)
        } else {
            let g = f - direct;
            let c = g / SIM_PAIRS;
            let (a, b) = self.pairs[g % SIM_PAIRS];
            let (a, b) = (a as usize, b as usize);
            let va = s.blurred_at(c, xs + self.grid[a % GRID], ys + self.grid[a / GRID]);
            let vb = s.blurred_at(c, xs + self.grid[b % GRID], ys + self.grid[b / GRID]);
            va - vb
        }
    }
}
