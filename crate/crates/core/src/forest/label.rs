use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::StandardNormal;

use super::features::TARGET;
use crate::util::{derive_seed, rng_from};

/// Same-segment tests per node.
pub const PAIR_TESTS: usize = 256;
pub const TARGET_PIXELS: usize = TARGET * TARGET;

/// Segment ids of a 16×16 target window, relabelled densely from 0.
pub type SegPatch = [u8; TARGET_PIXELS];
/// 256 bits, row-major over the target window or over the pair tests.
pub type Bits256 = [u64; 4];

#[inline]
pub fn bit(b: &Bits256, i: usize) -> bool {
    b[i >> 6] >> (i & 63) & 1 == 1
}

#[inline]
pub fn set_bit(b: &mut Bits256, i: usize) {
    b[i >> 6] |= 1 << (i & 63);
}

pub fn popcount(b: &Bits256) -> u32 {
    b.iter().map(|w| w.count_ones()).sum()
}

/// Relabels arbitrary segment ids to 0, 1, … in first-occurrence order.
pub fn relabel(ids: &[u32]) -> SegPatch {
    assert_eq!(ids.len(), TARGET_PIXELS);
    let mut seen: Vec<u32> = Vec::new();
    let mut out = [0u8; TARGET_PIXELS];
    for (o, id) in out.iter_mut().zip(ids) {
        let k = match seen.iter().position(|s| s == id) {
            Some(k) => k,
            None => {
                seen.push(*id);
                seen.len() - 1
            }
        };
        *o = k as u8;
    }
    out
}

/// Node-seeded pixel pairs (distinct pixels) within the target window.
pub fn pixel_pairs(node_seed: u64) -> Vec<(u8, u8)> {
    let mut rng = rng_from(derive_seed(node_seed, &[1]));
    (0..PAIR_TESTS)
        .map(|_| {
            let a = rng.random_range(0..TARGET_PIXELS);
            let mut b = rng.random_range(0..TARGET_PIXELS - 1);
            if b >= a {
                b += 1;
            }
            (a as u8, b as u8)
        })
        .collect()
}

/// Bit i set iff both pixels of pair i lie in the same segment.
pub fn pair_vector(seg: &SegPatch, pairs: &[(u8, u8)]) -> Bits256 {
    let mut out = [0u64; 4];
    for (i, &(a, b)) in pairs.iter().enumerate() {
        if seg[a as usize] == seg[b as usize] {
            set_bit(&mut out, i);
        }
    }
    out
}

/// Distinct pair vectors of a node with multiplicities, in sorted order, and
/// the index of each sample's vector.
pub(crate) struct NodeVectors {
    pub unique: Vec<Bits256>,
    pub counts: Vec<usize>,
    pub of_sample: Vec<usize>,
    pub mean: [f64; PAIR_TESTS],
}

impl NodeVectors {
    pub fn new(segs: &[&SegPatch], pairs: &[(u8, u8)]) -> Self {
        let vecs: Vec<Bits256> = segs.iter().map(|s| pair_vector(s, pairs)).collect();
        let mut map: BTreeMap<Bits256, usize> = BTreeMap::new();
        for v in &vecs {
            *map.entry(*v).or_default() += 1;
        }
        let unique: Vec<Bits256> = map.keys().copied().collect();
        let counts: Vec<usize> = map.values().copied().collect();
        let of_sample = vecs
            .iter()
            .map(|v| unique.binary_search(v).expect("present"))
            .collect();
        let mut mean = [0.0; PAIR_TESTS];
        for (u, &c) in unique.iter().zip(&counts) {
            for (i, m) in mean.iter_mut().enumerate() {
                if bit(u, i) {
                    *m += c as f64;
                }
            }
        }
        let n = segs.len().max(1) as f64;
        mean.iter_mut().for_each(|m| *m /= n);
        Self {
            unique,
            counts,
            of_sample,
            mean,
        }
    }

    /// (z - mean) · v for one unique vector.
    fn project(&self, u: usize, v: &[f64; PAIR_TESTS], mean_dot: f64) -> f64 {
        let mut s = 0.0;
        for (w, &word) in self.unique[u].iter().enumerate() {
            let mut word = word;
            while word != 0 {
                let t = word.trailing_zeros() as usize;
                s += v[w * 64 + t];
                word &= word - 1;
            }
        }
        s - mean_dot
    }

    /// Squared distance of unique vector `u` to the node mean.
    pub fn dist_to_mean(&self, u: usize) -> f64 {
        (0..PAIR_TESTS)
            .map(|i| {
                let z = if bit(&self.unique[u], i) { 1.0 } else { 0.0 };
                (z - self.mean[i]) * (z - self.mean[i])
            })
            .sum()
    }

    /// Top principal direction of the centred vectors by power iteration.
    /// `None` when every vector is identical.
    fn principal_direction(&self, seed: u64) -> Option<[f64; PAIR_TESTS]> {
        if self.unique.len() < 2 {
            return None;
        }
        let mut rng = rng_from(derive_seed(seed, &[3]));
        let mut v = [0.0; PAIR_TESTS];
        for x in v.iter_mut() {
            *x = rng.sample(StandardNormal);
        }
        normalize(&mut v)?;
        for _ in 0..2000 {
            let mean_dot: f64 = v.iter().zip(&self.mean).map(|(a, b)| a * b).sum();
            let mut next = [0.0; PAIR_TESTS];
            let mut total = 0.0;
            for (u, &c) in self.counts.iter().enumerate() {
                let p = self.project(u, &v, mean_dot) * c as f64;
                total += p;
                for (w, &word) in self.unique[u].iter().enumerate() {
                    let mut word = word;
                    while word != 0 {
                        let t = word.trailing_zeros() as usize;
                        next[w * 64 + t] += p;
                        word &= word - 1;
                    }
                }
            }
            for (x, m) in next.iter_mut().zip(&self.mean) {
                *x -= total * m;
            }
            normalize(&mut next)?;
            let delta: f64 = next.iter().zip(&v).map(|(a, b)| (a - b) * (a - b)).sum();
            v = next;
            if delta < 1e-24 {
                break;
            }
        }
        Some(v)
    }

    /// Binary label per unique vector: sign of the projection on the top
    /// principal direction, zero counted as positive.
    pub fn unique_labels(&self, seed: u64) -> Option<Vec<bool>> {
        let dir = self.principal_direction(seed)?;
        let mean_dot: f64 = dir.iter().zip(&self.mean).map(|(a, b)| a * b).sum();
        Some(
            (0..self.unique.len())
                .map(|u| self.project(u, &dir, mean_dot) >= 0.0)
                .collect(),
        )
    }
}

fn normalize(v: &mut [f64; PAIR_TESTS]) -> Option<()> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(n > 1e-300) {
        return None;
    }
    v.iter_mut().for_each(|x| *x /= n);
    Some(())
}

/// Binary split labels for the targets reaching a node, or `None` if all
/// targets give the same pair vector (the node is pure).
pub fn structured_split_label(segs: &[&SegPatch], node_seed: u64) -> Option<Vec<bool>> {
    if segs.len() < 2 {
        return None;
    }
    let nv = NodeVectors::new(segs, &pixel_pairs(node_seed));
    let labels = nv.unique_labels(node_seed)?;
    Some(nv.of_sample.iter().map(|&u| labels[u]).collect())
}
